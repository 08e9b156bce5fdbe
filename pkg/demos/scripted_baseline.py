"""Open the door with the scripted hook-and-pull baseline.

The baseline steers the hook onto the handle and then pulls it along the
door normal. It is a sanity check that the simulated task is solvable with
the episode's action limits, independent of any learning.

    python demos/scripted_baseline.py
"""

from omav_door.evaluation import ExperimentSpec, ScriptedTrials, hook_and_pull, run_sweep


def main() -> None:
    spec = ExperimentSpec("lateral_offset", values=(0.0, 0.06, 0.12), trials_per_value=4, timeout_seconds=15.0)
    for row in run_sweep(spec, controller=ScriptedTrials(hook_and_pull)):
        print(f"offset {row.value:+.2f} m: {row.successes}/{row.trials} opened, mean time {row.mean_time_s:.1f} s")


if __name__ == "__main__":
    main()
