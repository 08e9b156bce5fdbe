"""Drive the hook towards the handle with the sampling-based MPPI controller.

Prints the hook-to-handle distance and door angle once per simulated second.

    python demos/mppi_approach.py
"""

import numpy as np

from omav_door.control import PoseGains
from omav_door.env import EpisodeConfig, canonical_world, env_step, relative_quantities
from omav_door.evaluation import mppi_raw_action
from omav_door.mppi import MppiConfig, MppiController
from omav_door.world import GeometryConfig


def main(seconds: float = 5.0) -> None:
    config, gains, episode = GeometryConfig(), PoseGains(), EpisodeConfig()
    world = canonical_world(config, [-0.25, 0.15, 0.1])
    ctrl = MppiController(MppiConfig(), 0, config, gains, episode)
    steps_per_second = int(episode.control_rate_hz)
    for step in range(int(seconds * steps_per_second) + 1):
        if step % steps_per_second == 0:
            dist = np.linalg.norm(relative_quantities(world, config)[0])
            print(f"t = {step / steps_per_second:4.1f} s  distance {dist:.3f} m  door angle {float(world.door.angle):.3f} rad")
        world, *_ = env_step(world, mppi_raw_action(ctrl.control(world)), episode, gains, config)
    last = ctrl.diagnostics[-1]
    print(f"last replan: effective sample size {last.effective_sample_size:.1f} of {ctrl.cfg.num_samples}")


if __name__ == "__main__":
    main()
