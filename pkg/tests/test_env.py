from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from omav_door import rotations as so3
from omav_door.control import PoseGains
from omav_door.env import (ACT_DIM, OBS_DIM, REWARD_WEIGHTS, TRACE_COLUMNS, DoorEnv, EpisodeConfig, Observation,
                           RandomizationConfig, canonical_world, compute_reward, decode_action, env_step, observe,
                           reset_randomized, reward_from_quantities, rollout_trace)
from omav_door.policy import NEUTRAL_ACTION
from omav_door.world import HALF_PI, GeometryConfig, Wrench, handle_frame, hook_center, stack_worlds
from helpers import random_rotations

CFG = GeometryConfig()
EP = EpisodeConfig()
GAINS = PoseGains()
I9 = np.eye(3)


def test_observation_layout():
    world = canonical_world(CFG, [0.1, -0.2, 0.3], so3.exp_so3(np.array([0.0, 0.0, 0.4])), angle=1.0,
                            linear_velocity_B=[1, 2, 3], angular_velocity_B=[4, 5, 6])
    obs = observe(world, EP, CFG)
    vec = obs.vector
    assert vec.shape == (OBS_DIM,)
    np.testing.assert_array_equal(vec[0:3], [1, 2, 3])
    np.testing.assert_array_equal(vec[3:6], [4, 5, 6])
    # hook - handle in the body frame
    R_DB = so3.exp_so3(np.array([0.0, 0.0, 0.4]))
    np.testing.assert_allclose(vec[6:9], R_DB.T @ [0.1, -0.2, 0.3], atol=1e-12)
    np.testing.assert_allclose(vec[9:18].reshape(3, 3), R_DB.T, atol=1e-12)
    assert vec[18] == pytest.approx(1.0)
    back = Observation.from_vector(vec)
    np.testing.assert_array_equal(back.vector, vec)
    with pytest.raises(ValueError):
        Observation.from_vector(np.zeros(OBS_DIM - 1))


def test_observation_angle_is_relative_to_target():
    world = canonical_world(CFG, angle=0.3)
    closing = replace(EP, alpha_target=HALF_PI)
    assert observe(world, closing, CFG).door_angle == pytest.approx(0.3 - HALF_PI)
    assert observe(world, EP, CFG).door_angle == pytest.approx(0.3)


def test_batched_observation_matches_single(rng):
    worlds = [reset_randomized(rng, RandomizationConfig(), CFG) for _ in range(5)]
    batch = observe(stack_worlds(worlds), EP, CFG).vector
    assert batch.shape == (5, OBS_DIM)
    for i, w in enumerate(worlds):
        np.testing.assert_allclose(batch[i], observe(w, EP, CFG).vector, atol=1e-15)


# ----------------------------------------------------------------------------
# reward
# ----------------------------------------------------------------------------

Z3 = np.zeros(3)
Z6 = np.zeros(6)
REWARD_TABLE = [
    # p_hd, R_BD, alpha error, v, w, wrench, expected total
    ("at goal", Z3, I9, 0.0, Z3, Z3, Z6, 0.0),
    ("hook inside band", [0.03, 0.04, 0.0], I9, 0.0, Z3, Z3, Z6, -50.0),
    ("hook on band edge", [0.06, 0.0, 0.0], I9, 0.0, Z3, Z3, Z6, -60.0),
    ("hook outside band", [0.0, -0.1, 0.0], I9, 0.0, Z3, Z3, Z6, -1100.0),
    ("tilted", Z3, so3.exp_so3(np.array([0.0, 0.0, 0.5])), 0.0, Z3, Z3, Z6, -500.0),
    ("upside down", Z3, so3.exp_so3(np.array([np.pi, 0.0, 0.0])), 0.0, Z3, Z3, Z6, -1000.0 * np.pi),
    ("door partly open", Z3, I9, 0.5, Z3, Z3, Z6, -50.0),
    ("door on band edge", Z3, I9, 1.0, Z3, Z3, Z6, -100.0),
    ("door closed", Z3, I9, HALF_PI, Z3, Z3, Z6, -100.0 * HALF_PI - 2000.0),
    ("moving", Z3, I9, 0.0, [1.0, 2.0, 2.0], Z3, Z6, -90.0),
    ("spinning", Z3, I9, 0.0, Z3, [0.0, 3.0, 4.0], Z6, -250.0),
    ("pushing", Z3, I9, 0.0, Z3, Z3, [1, 2, 3, 4, 5, 6], -91.0),
    ("everything", [0.0, 0.0, 0.2], so3.exp_so3(np.array([0.1, 0.0, 0.0])), 1.2, [0.1, 0, 0], [0, 0, 1.0],
     [0, 0, 10.0, 0, 0, 0], -200.0 - 1000.0 - 100.0 - 120.0 - 2000.0 - 0.1 - 10.0 - 100.0),
]


@pytest.mark.parametrize("case", REWARD_TABLE, ids=[c[0] for c in REWARD_TABLE])
def test_reward_table(case):
    _, p, R, err, v, w, wrench, expected = case
    r = reward_from_quantities(np.asarray(p, float), R, err, 0.0, np.asarray(v, float), np.asarray(w, float),
                               np.asarray(wrench, float), EP)
    assert float(r.total) == pytest.approx(expected, abs=1e-9)
    parts = sum(REWARD_WEIGHTS[k] * v for k, v in r.components().items())
    assert float(parts) == pytest.approx(float(r.total), abs=1e-12)


def test_reward_target_symmetry():
    r1 = reward_from_quantities(Z3, I9, 0.3, 0.0, Z3, Z3, Z6, EP)
    r2 = reward_from_quantities(Z3, I9, HALF_PI - 0.3, HALF_PI, Z3, Z3, Z6, EP)
    assert float(r1.total) == pytest.approx(float(r2.total), abs=1e-12)


def test_reward_is_never_positive(rng):
    n = 5000
    r = reward_from_quantities(rng.normal(size=(n, 3)), random_rotations(rng, n), rng.uniform(0, HALF_PI, n), 0.0,
                               rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 6)), EP)
    assert np.all(r.total <= 0.0)


def test_compute_reward_uses_full_wrench():
    world = canonical_world(CFG)
    r = compute_reward(world, Wrench(np.array([0.0, 0.0, 3.0]), np.array([4.0, 0.0, 0.0])), EP, CFG)
    assert float(r.r_tau) == pytest.approx(-25.0)


def test_reward_invariant_under_rigid_scene_motion(rng):
    Q = random_rotations(rng, 1)[0]
    t = rng.normal(size=3)
    moved_cfg = replace(CFG, hinge_axis_W=Q @ CFG.hinge_axis_W, hinge_point_W=Q @ CFG.hinge_point_W + t,
                        closed_door_orientation_W=Q @ CFG.closed_door_orientation_W)
    wrench = Wrench(rng.normal(size=3), rng.normal(size=3))
    for _ in range(20):
        world = reset_randomized(rng, RandomizationConfig(), CFG)
        world = replace(world, door=replace(world.door, angle=np.float64(rng.uniform(0, HALF_PI))))
        moved = replace(world, robot=replace(world.robot, position_W=Q @ world.robot.position_W + t,
                                             orientation_WB=Q @ world.robot.orientation_WB))
        np.testing.assert_allclose(observe(moved, EP, moved_cfg).vector, observe(world, EP, CFG).vector,
                                   atol=1e-12)
        assert float(compute_reward(moved, wrench, EP, moved_cfg).total) == pytest.approx(
            float(compute_reward(world, wrench, EP, CFG).total), abs=1e-9)


# ----------------------------------------------------------------------------
# action decoding
# ----------------------------------------------------------------------------

def test_decode_translation_and_identity_rotation():
    world = canonical_world(CFG, [-0.2, 0.1, 0.0])
    ref, cmd = decode_action(np.array([0.1, 0.0, 0.0, 1, 0, 0, 0, 1, 0]), world, EP, CFG)
    np.testing.assert_allclose(ref.position_W_ref, world.robot.position_W + [0.1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(ref.orientation_WB_ref, np.eye(3), atol=1e-15)
    assert not cmd.degenerate


def test_decode_offset_follows_open_door_frame():
    world = canonical_world(CFG, [-0.2, 0.1, 0.0], angle=0.0)  # R_WD = Rz(pi/2)
    ref, _ = decode_action(NEUTRAL_ACTION + [0.1, 0, 0, 0, 0, 0, 0, 0, 0], world, EP, CFG)
    np.testing.assert_allclose(ref.position_W_ref - world.robot.position_W, [0, 0.1, 0], atol=1e-15)


def test_decode_translation_saturation():
    world = canonical_world(CFG, [-0.2, 0.1, 0.0])
    raw = np.array([0.3, 0.4, 0.0, 1, 0, 0, 0, 1, 0])
    ref, _ = decode_action(raw, world, EP, CFG)
    np.testing.assert_allclose(ref.position_W_ref - world.robot.position_W, [0.09, 0.12, 0.0], atol=1e-15)
    ref, _ = decode_action(raw, world, replace(EP, saturation_enabled=False), CFG)
    np.testing.assert_allclose(ref.position_W_ref - world.robot.position_W, [0.3, 0.4, 0.0], atol=1e-15)


def test_decode_rotation_saturation():
    world = canonical_world(CFG, [-0.2, 0.1, 0.0])
    c, s = np.cos(1.0), np.sin(1.0)
    raw = np.array([0, 0, 0, c, s, 0, -s, c, 0])  # Rz(1.0)
    ref, _ = decode_action(raw, world, EP, CFG)
    np.testing.assert_allclose(ref.orientation_WB_ref, so3.exp_so3(np.array([0, 0, 0.2])), atol=1e-12)
    ref, _ = decode_action(raw, world, replace(EP, saturation_enabled=False), CFG)
    np.testing.assert_allclose(ref.orientation_WB_ref, so3.exp_so3(np.array([0, 0, 1.0])), atol=1e-12)


def test_decode_degenerate_lambdas_flagged():
    world = canonical_world(CFG, [-0.2, 0.1, 0.0])
    raw = np.stack([np.zeros(ACT_DIM), np.r_[0, 0, 0, 1, 1, 0, 2, 2, 0]])
    ref, cmd = decode_action(raw, stack_worlds([world, world]), EP, CFG)
    assert cmd.degenerate.tolist() == [True, True]
    np.testing.assert_allclose(ref.orientation_WB_ref, np.broadcast_to(np.eye(3), (2, 3, 3)), atol=1e-15)


def test_saturation_bounds_hold_for_a_million_actions(rng):
    rand = RandomizationConfig()
    base = stack_worlds([reset_randomized(rng, rand, CFG) for _ in range(100)])
    n = 100_000
    for _ in range(10):
        idx = rng.integers(0, 100, n)
        world = replace(base, robot=replace(base.robot, position_W=base.robot.position_W[idx],
                                            orientation_WB=base.robot.orientation_WB[idx],
                                            linear_velocity_B=base.robot.linear_velocity_B[idx],
                                            angular_velocity_B=base.robot.angular_velocity_B[idx]),
                        door=replace(base.door, angle=rng.uniform(0, HALF_PI, n), angular_rate=np.zeros(n),
                                     handle_offset_D=base.door.handle_offset_D[idx]),
                        time=np.zeros(n))
        raw = rng.normal(scale=rng.choice([0.05, 0.5, 5.0, 50.0], size=(n, 1)), size=(n, ACT_DIM))
        ref, _ = decode_action(raw, world, EP, CFG)
        shift = np.linalg.norm(ref.position_W_ref - world.robot.position_W, axis=-1)
        assert shift.max() <= EP.max_translation + 1e-12
        turn = so3.geodesic_angle(so3.matTmul(world.robot.orientation_WB, ref.orientation_WB_ref))
        assert turn.max() <= EP.max_rotation + 1e-9


# ----------------------------------------------------------------------------
# reset
# ----------------------------------------------------------------------------

def test_reset_statistics_over_many_samples():
    rng = np.random.default_rng(2024)
    rand = RandomizationConfig()
    n = 100_000
    world = stack_worlds([reset_randomized(rng, rand, CFG) for _ in range(n)])
    p_d, R_WD = handle_frame(world.door, CFG)
    hook_D = so3.matTvec(R_WD, hook_center(world.robot, CFG) - p_d)
    rpy = Rotation.from_matrix(so3.matTmul(R_WD, world.robot.orientation_WB)).as_euler("xyz")
    samples = {
        "init_position_range_D": hook_D,
        "init_rpy_range": rpy,
        "init_linvel_range": world.robot.linear_velocity_B,
        "init_angvel_range": world.robot.angular_velocity_B,
        "handle_offset_range": world.door.handle_offset_D,
    }
    assert np.all(world.door.angle == HALF_PI) and np.all(world.door.angular_rate == 0.0)
    for name, x in samples.items():
        lo, hi = getattr(rand, name).T
        width = hi - lo
        assert np.all(x.min(axis=0) >= lo - 1e-12) and np.all(x.max(axis=0) <= hi + 1e-12), name
        # uniform: mean (lo+hi)/2 and variance width^2/12, 5 standard errors
        np.testing.assert_array_less(np.abs(x.mean(axis=0) - (lo + hi) / 2), 5 * width / np.sqrt(12 * n), name)
        np.testing.assert_allclose(x.var(axis=0), width**2 / 12, rtol=0.02, err_msg=name)


def test_collapsed_reset_is_canonical():
    w = reset_randomized(7, RandomizationConfig.collapsed(), CFG)
    ref = canonical_world(CFG)
    np.testing.assert_allclose(w.robot.position_W, ref.robot.position_W, atol=1e-15)
    np.testing.assert_allclose(w.robot.orientation_WB, np.eye(3), atol=1e-15)


def test_randomization_ranges_validated():
    with pytest.raises(ValueError):
        RandomizationConfig(init_rpy_range=[[0.2, -0.2]] * 3)


# ----------------------------------------------------------------------------
# stepping and episodes
# ----------------------------------------------------------------------------

def test_neutral_action_hovers_in_place():
    world = canonical_world(CFG, [-0.4, 0.3, 0.2])
    start = world.robot.position_W.copy()
    for _ in range(300):
        world, _, _, done, _ = env_step(world, NEUTRAL_ACTION, EP, GAINS, CFG)
        assert not done
    assert np.linalg.norm(world.robot.position_W - start) < 0.01
    assert world.door.angle == HALF_PI


def test_success_when_door_at_target_and_still():
    world = canonical_world(CFG, [-0.4, 0.3, 0.2], angle=0.05)
    _, _, _, done, info = env_step(world, NEUTRAL_ACTION, EP, GAINS, CFG)
    assert done and info.success and not info.timeout
    closing = replace(EP, alpha_target=HALF_PI)
    world = canonical_world(CFG, [-0.4, 0.3, 0.2])
    _, _, _, done, info = env_step(world, NEUTRAL_ACTION, closing, GAINS, CFG)
    assert done and info.success


def test_timeout_after_episode_length():
    ep = replace(EP, max_episode_seconds=0.05)
    world = canonical_world(CFG, [-0.4, 0.3, 0.2])
    for k in range(5):
        world, _, _, done, info = env_step(world, NEUTRAL_ACTION, ep, GAINS, CFG)
        assert bool(done) == (k == 4)
    assert info.timeout and not info.success
    assert world.time == pytest.approx(0.05)


def test_non_finite_action_fails_episode_without_raising():
    world = canonical_world(CFG, [-0.4, 0.3, 0.2])
    raw = NEUTRAL_ACTION.copy()
    raw[0] = np.nan
    nxt, obs, reward, done, info = env_step(world, raw, replace(EP, saturation_enabled=False), GAINS, CFG)
    assert done and info.failure
    np.testing.assert_array_equal(nxt.robot.position_W, world.robot.position_W)
    assert np.all(np.isfinite(obs.vector))


def test_backends_agree(rng):
    rand = RandomizationConfig()
    world = stack_worlds([reset_randomized(rng, rand, CFG) for _ in range(8)])
    w_c, w_n = world, world
    for _ in range(50):
        raw = NEUTRAL_ACTION + rng.normal(scale=0.3, size=(8, ACT_DIM))
        w_c, o_c, r_c, _, _ = env_step(w_c, raw, EP, GAINS, CFG, backend="compiled")
        w_n, o_n, r_n, _, _ = env_step(w_n, raw, EP, GAINS, CFG, backend="numpy")
    np.testing.assert_allclose(o_c.vector, o_n.vector, atol=1e-9)
    np.testing.assert_allclose(r_c.total, r_n.total, rtol=1e-9)
    with pytest.raises(ValueError):
        env_step(world, NEUTRAL_ACTION, EP, GAINS, CFG, backend="gpu")


def test_door_env_auto_reset_and_determinism():
    ep = replace(EP, max_episode_seconds=0.1)
    a, b = DoorEnv(3, seed=11, episode=ep), DoorEnv(3, seed=11, episode=ep)
    oa, ob = a.reset(), b.reset()
    np.testing.assert_array_equal(oa, ob)
    actions = np.tile(NEUTRAL_ACTION, (3, 1))
    for k in range(10):
        oa, ra, da, ia = a.step(actions)
        ob, rb, db, ib = b.step(actions)
        np.testing.assert_array_equal(oa, ob)
    assert da.all() and len(ia["finished"]) == 3
    assert all(length == 10 for _, _, length, _ in ia["finished"])
    # the returned observation is post-reset, the final one is not
    assert not np.allclose(ia["final_obs"], oa)
    np.testing.assert_array_equal(oa, a.observation())


def test_rollout_trace_rows_are_consistent():
    world = canonical_world(CFG, [-0.2, 0.1, 0.0])
    rows = rollout_trace(world, lambda w, o: NEUTRAL_ACTION, EP, GAINS, CFG, max_steps=20)
    assert len(rows) == 20 and all(len(r) == len(TRACE_COLUMNS) for r in rows)
    col = {name: i for i, name in enumerate(TRACE_COLUMNS)}
    last = rows[-1]
    assert last[col["time"]] == pytest.approx(0.2)
    assert last[col["total"]] == pytest.approx(sum(REWARD_WEIGHTS[k] * last[col[k]] for k in REWARD_WEIGHTS))
