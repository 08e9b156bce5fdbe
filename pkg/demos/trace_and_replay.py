"""Record a per-step trace and check it with the replay command.

Replay recomputes every reward term from the logged relative quantities,
so a clean trace reports zero divergent rows.

    python demos/trace_and_replay.py
"""

import tempfile
from pathlib import Path

from omav_door.cli import main as cli
from omav_door.control import PoseGains
from omav_door.env import EpisodeConfig, RandomizationConfig, rollout_trace, write_trace
from omav_door.evaluation import hook_and_pull, initial_world
from omav_door.world import GeometryConfig


def main() -> None:
    config, episode = GeometryConfig(), EpisodeConfig()
    world = initial_world("lateral_offset", 0.0, [0, 0], RandomizationConfig(), config)
    rows = rollout_trace(world, hook_and_pull, episode, PoseGains(), config, max_steps=300)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "trace.csv"
        write_trace(path, rows)
        print(f"wrote {len(rows)} rows; replaying")
        code = cli(["replay", str(path)])
    print(f"replay exit code {code}")


if __name__ == "__main__":
    main()
