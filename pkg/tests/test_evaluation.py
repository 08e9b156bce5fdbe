import math
from dataclasses import replace

import numpy as np
import pytest

from omav_door.env import EpisodeConfig, RandomizationConfig, observe, relative_quantities
from omav_door.evaluation import (DEFAULT_SWEEPS, RESULT_COLUMNS, EvaluationError, ExperimentSpec, MppiTrials,
                                  ScriptedTrials, apply_observation_offset, episode_for, front_hemisphere_direction,
                                  hook_and_pull, initial_world, make_controller, offset_for, read_results,
                                  run_sweep, write_results)
from omav_door.mppi import MppiConfig
from omav_door.policy import NEUTRAL_ACTION, Agent, save_checkpoint
from omav_door.world import HALF_PI, GeometryConfig

CFG = GeometryConfig()
RAND = RandomizationConfig()


def neutral(world, obs):
    return np.tile(NEUTRAL_ACTION, (obs.door_angle.shape[0], 1))


def test_spec_defaults_and_validation():
    spec = ExperimentSpec("initial_distance")
    assert spec.values == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4)
    assert ExperimentSpec("lateral_offset").values[0] == -0.12 and len(DEFAULT_SWEEPS["vertical_offset"]) == 9
    with pytest.raises(ValueError):
        ExperimentSpec("sideways")
    with pytest.raises(ValueError):
        ExperimentSpec("door_closing", trials_per_value=0)
    with pytest.raises(ValueError):
        ExperimentSpec("door_closing", controller="pid")


def test_offset_for_axes():
    np.testing.assert_array_equal(offset_for("lateral_offset", 0.03), [0, 0.03, 0])
    np.testing.assert_array_equal(offset_for("vertical_offset", -0.06), [0, 0, -0.06])
    np.testing.assert_array_equal(offset_for("initial_distance", 0.4), [0, 0, 0])


def test_observation_offset_equals_moving_the_handle(rng):
    for _ in range(10):
        world = initial_world("lateral_offset", 0.0, rng.integers(1 << 30), RAND, CFG)
        world = replace(world, door=replace(world.door, angle=np.float64(rng.uniform(0, HALF_PI))))
        offset = rng.uniform(-0.12, 0.12, 3)
        moved = replace(world, door=replace(world.door, handle_offset_D=world.door.handle_offset_D + offset))
        shifted = apply_observation_offset(observe(world, EpisodeConfig(), CFG), offset)
        np.testing.assert_allclose(shifted.vector, observe(moved, EpisodeConfig(), CFG).vector, atol=1e-14)


def test_front_hemisphere_directions():
    rng = np.random.default_rng(0)
    d = np.array([front_hemisphere_direction(rng) for _ in range(20_000)])
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert np.all(d[:, 0] <= 0)
    # uniform on the half sphere: E[x] = -1/2, E[y] = E[z] = 0, E[y^2] = 1/3
    np.testing.assert_allclose(d.mean(axis=0), [-0.5, 0, 0], atol=0.015)
    assert np.mean(d[:, 1] ** 2) == pytest.approx(1 / 3, abs=0.01)


@pytest.mark.parametrize("distance", [0.0, 0.2, 1.4])
def test_initial_distance_start_state(distance):
    world = initial_world("initial_distance", distance, [0, 3], RAND, CFG)
    p_hd, R_BD = relative_quantities(world, CFG)
    assert np.linalg.norm(p_hd) == pytest.approx(distance, abs=1e-12)
    np.testing.assert_array_equal(world.robot.linear_velocity_B, 0.0)
    np.testing.assert_array_equal(world.robot.angular_velocity_B, 0.0)
    assert world.door.angle == HALF_PI
    # the direction is shared across sweep values for the same trial seed
    other = initial_world("initial_distance", 0.5, [0, 3], RAND, CFG)
    if distance > 0:
        np.testing.assert_allclose(relative_quantities(other, CFG)[0], p_hd * 0.5 / distance, atol=1e-12)


def test_offset_sweeps_share_start_states():
    a = initial_world("lateral_offset", -0.12, [1, 2], RAND, CFG)
    b = initial_world("vertical_offset", 0.09, [1, 2], RAND, CFG)
    np.testing.assert_array_equal(a.robot.position_W, b.robot.position_W)


def test_door_closing_start_and_episode():
    world = initial_world("door_closing", 0.0, [0, 1], RAND, CFG)
    assert world.door.angle == 0.0
    assert np.linalg.norm(relative_quantities(world, CFG)[0]) == pytest.approx(0.0, abs=1e-12)
    ep = episode_for("door_closing", EpisodeConfig(), ExperimentSpec("door_closing", timeout_seconds=7))
    assert ep.alpha_target == HALF_PI and ep.max_episode_seconds == 7
    assert episode_for("initial_distance", EpisodeConfig(), ExperimentSpec("initial_distance")).alpha_target == 0


def test_wide_band_succeeds_immediately():
    spec = ExperimentSpec("initial_distance", values=(0.2,), trials_per_value=3, timeout_seconds=1.0,
                          success_band=1.0)
    (row,) = run_sweep(spec, controller=ScriptedTrials(neutral))
    assert row.successes == 3 and row.success_rate == 1.0
    assert row.mean_time_s == pytest.approx(0.01) and row.std_time_s == 0.0


def test_timeouts_report_nan_times():
    spec = ExperimentSpec("initial_distance", values=(0.2, 0.4), trials_per_value=2, timeout_seconds=0.05)
    rows = run_sweep(spec, controller=ScriptedTrials(neutral))
    assert [r.value for r in rows] == [0.2, 0.4]
    for r in rows:
        assert r.successes == 0 and math.isnan(r.mean_time_s) and math.isnan(r.std_time_s)
        assert all(t.final_angle == HALF_PI for t in r.results)


def test_scripted_hook_and_pull_opens_the_door():
    spec = ExperimentSpec("lateral_offset", values=(0.0,), trials_per_value=4, timeout_seconds=15.0)
    (row,) = run_sweep(spec, controller=ScriptedTrials(hook_and_pull))
    assert row.successes >= 3
    assert 3.0 < row.mean_time_s < 15.0


def test_sweep_is_reproducible():
    spec = ExperimentSpec("vertical_offset", values=(0.03,), trials_per_value=2, timeout_seconds=2.0)
    a = run_sweep(spec, controller=ScriptedTrials(hook_and_pull))
    b = run_sweep(spec, controller=ScriptedTrials(hook_and_pull))
    assert [t.final_angle for t in a[0].results] == [t.final_angle for t in b[0].results]


def test_traces_written_per_trial(tmp_path):
    spec = ExperimentSpec("lateral_offset", values=(0.03,), trials_per_value=2, timeout_seconds=0.1)
    (row,) = run_sweep(spec, controller=ScriptedTrials(neutral), trace_dir=tmp_path)
    paths = sorted(p.name for p in tmp_path.iterdir())
    assert paths == ["lateral_offset_0.03_000.csv", "lateral_offset_0.03_001.csv"]
    assert len((tmp_path / paths[0]).read_text().strip().splitlines()) == 1 + 10


def test_results_round_trip(tmp_path):
    spec = ExperimentSpec("initial_distance", values=(0.1, 0.3), trials_per_value=1, timeout_seconds=0.03)
    rows = run_sweep(spec, controller=ScriptedTrials(neutral))
    write_results(tmp_path / "r.csv", rows)
    back = read_results(tmp_path / "r.csv")
    assert list(back[0]) == list(RESULT_COLUMNS)
    assert [float(r["value"]) for r in back] == [0.1, 0.3]
    assert back[0]["mean_time_s"] == "nan"


def test_controller_construction_errors(tmp_path):
    with pytest.raises(EvaluationError, match="needs a checkpoint"):
        make_controller(ExperimentSpec("door_closing"), CFG, None)
    with pytest.raises(EvaluationError, match="not found"):
        make_controller(ExperimentSpec("door_closing", checkpoint=str(tmp_path / "nope.npz")), CFG, None)
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(EvaluationError, match="cannot read"):
        make_controller(ExperimentSpec("door_closing", checkpoint=str(bad)), CFG, None)
    good = tmp_path / "good.npz"
    save_checkpoint(good, Agent.initial(0))
    assert make_controller(ExperimentSpec("door_closing", checkpoint=str(good)), CFG, None) is not None
    assert isinstance(make_controller(ExperimentSpec("door_closing", controller="mppi"), CFG, None), MppiTrials)


def test_policy_and_mppi_sweeps_run(tmp_path):
    path = tmp_path / "a.npz"
    save_checkpoint(path, Agent.initial(0))
    spec = ExperimentSpec("vertical_offset", values=(0.0,), trials_per_value=2, timeout_seconds=0.2,
                          checkpoint=str(path))
    (row,) = run_sweep(spec)
    assert row.trials == 2
    spec = replace(spec, controller="mppi", checkpoint=None)
    (row,) = run_sweep(spec, mppi=MppiConfig(horizon_steps=3, num_samples=8))
    assert row.trials == 2 and row.successes == 0
