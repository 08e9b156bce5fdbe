import sys

from omav_door.cli import main

sys.exit(main())
