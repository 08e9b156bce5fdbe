"""Run a few PPO updates in process and evaluate the result.

This is a smoke-scale run (a few seconds); the full budget is the CLI
default ``omav-door train --out runs/ppo``.

    python demos/short_training.py [out_dir]
"""

import sys

from omav_door.evaluation import ExperimentSpec, PolicyTrials, run_sweep
from omav_door.ppo import PpoConfig, train_loop


def main(out_dir: str | None = None) -> None:
    cfg = PpoConfig(num_envs=4, steps_per_env=128, minibatch_size=256, total_steps=4 * 128 * 4, seed=1)
    agent, rows = train_loop(cfg, out_dir=out_dir)
    for row in rows:
        print(f"update {row['update']}: value loss {row['value_loss']:.4g}, entropy {row['entropy']:.3f}, "
              f"approx kl {row['approx_kl']:.4f}")
    spec = ExperimentSpec("initial_distance", values=(0.2,), trials_per_value=4, timeout_seconds=5.0)
    (result,) = run_sweep(spec, controller=PolicyTrials(agent))
    print(f"success from 0.2 m: {result.successes}/{result.trials}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
