"""Door-opening task: observations, action decoding, reward and episodes.

Functions work on single or batched :class:`~omav_door.world.WorldState`
values. :class:`DoorEnv` wraps a batch of independent episodes with
auto-reset for rollout collection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from omav_door import kernels
from omav_door import rotations as so3
from omav_door.control import PoseGains, PoseReference, compute_wrench
from omav_door.world import (
    HALF_PI,
    Array,
    DoorState,
    GeometryConfig,
    RobotState,
    WorldState,
    Wrench,
    handle_frame,
    hook_center,
    index_world,
    robot_state_finite,
    stack_worlds,
    step_world,
    where_world,
)

OBS_DIM = 19
ACT_DIM = 9

# Reward scaling coefficients, in RewardBreakdown field order
REWARD_WEIGHTS = {
    "r_h_dist": 1000.0,
    "r_h_in": 1000.0,
    "r_att": 1000.0,
    "r_d_dist": 100.0,
    "r_d_open": 2000.0,
    "r_vel_lin": 10.0,
    "r_vel_ang": 10.0,
    "r_tau": 1.0,
}


def _ranges(values) -> Array:
    out = np.asarray(values, dtype=np.float64).reshape(3, 2)
    if np.any(out[:, 0] > out[:, 1]):
        raise ValueError(f"range lower bound exceeds upper bound: {out.tolist()}")
    return out


@dataclass(frozen=True)
class RandomizationConfig:
    """Uniform sampling ranges, one ``(low, high)`` row per axis."""

    handle_offset_range: Array = field(default_factory=lambda: [[-0.005, 0.005]] * 3)
    init_position_range_D: Array = field(default_factory=lambda: [[-0.4, 0.0], [0.0, 0.4], [-0.4, 0.4]])
    init_rpy_range: Array = field(default_factory=lambda: [[-0.2, 0.2]] * 3)
    init_linvel_range: Array = field(default_factory=lambda: [[-0.1, 0.1]] * 3)
    init_angvel_range: Array = field(default_factory=lambda: [[-0.3, 0.3]] * 3)

    def __post_init__(self) -> None:
        for f in fields(self):
            object.__setattr__(self, f.name, _ranges(getattr(self, f.name)))

    @classmethod
    def collapsed(cls) -> "RandomizationConfig":
        zero = [[0.0, 0.0]] * 3
        return cls(zero, zero, zero, zero, zero)


@dataclass(frozen=True)
class EpisodeConfig:
    control_rate_hz: float = 100.0
    physics_substeps: int = 4
    max_episode_seconds: float = 15.0
    discount: float = 0.995
    delta_h_thresh: float = 0.06
    delta_d_thresh: float = 1.0
    alpha_target: float = 0.0
    saturation_enabled: bool = True
    max_translation: float = 0.15
    max_rotation: float = 0.2
    success_band: float = 0.1
    success_max_rate: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.delta_h_thresh <= 0 or self.delta_d_thresh <= 0:
            raise ValueError("thresholds must be positive")
        if self.physics_substeps < 1 or self.control_rate_hz <= 0:
            raise ValueError("invalid control timing")

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_rate_hz

    @property
    def physics_dt(self) -> float:
        return self.control_dt / self.physics_substeps


@dataclass(frozen=True)
class Observation:
    linear_velocity_B: Array
    angular_velocity_B: Array
    hook_to_handle_B: Array
    rot_BD_flat: Array
    door_angle: Array

    @property
    def vector(self) -> Array:
        return np.concatenate([self.linear_velocity_B, self.angular_velocity_B, self.hook_to_handle_B,
                               self.rot_BD_flat, np.asarray(self.door_angle)[..., None]], axis=-1)

    @classmethod
    def from_vector(cls, vec: Array) -> "Observation":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] != OBS_DIM:
            raise ValueError(f"expected {OBS_DIM} components, got {vec.shape[-1]}")
        return cls(vec[..., 0:3], vec[..., 3:6], vec[..., 6:9], vec[..., 9:18], vec[..., 18])


@dataclass(frozen=True)
class ActionCommand:
    raw: Array
    decoded_position_ref_W: Array
    decoded_orientation_ref: Array
    degenerate: NDArray[np.bool_]


@dataclass(frozen=True)
class RewardBreakdown:
    r_h_dist: Array
    r_h_in: Array
    r_att: Array
    r_d_dist: Array
    r_d_open: Array
    r_vel_lin: Array
    r_vel_ang: Array
    r_tau: Array
    total: Array

    def components(self) -> dict[str, Array]:
        return {name: getattr(self, name) for name in REWARD_WEIGHTS}


# ----------------------------------------------------------------------------
# Reset
# ----------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, ranges: Array) -> Array:
    return rng.uniform(ranges[:, 0], ranges[:, 1])


def canonical_world(config: GeometryConfig, hook_position_D=(0.0, 0.0, 0.0), rot_DB=None,
                    angle: float = HALF_PI, handle_offset_D=(0.0, 0.0, 0.0),
                    linear_velocity_B=(0.0, 0.0, 0.0), angular_velocity_B=(0.0, 0.0, 0.0)) -> WorldState:
    """World with the hook placed at ``hook_position_D`` in the handle frame."""
    door = DoorState(np.float64(angle), np.float64(0.0), np.asarray(handle_offset_D, dtype=np.float64))
    p_d, R_WD = handle_frame(door, config)
    R_DB = np.eye(3) if rot_DB is None else np.asarray(rot_DB, dtype=np.float64)
    R_WB = R_WD @ R_DB
    hook_W = p_d + R_WD @ np.asarray(hook_position_D, dtype=np.float64)
    position = hook_W - R_WB @ config.hook_offset_B
    robot = RobotState(position, R_WB, np.asarray(linear_velocity_B, dtype=np.float64),
                       np.asarray(angular_velocity_B, dtype=np.float64))
    return WorldState(robot, door, np.float64(0.0))


def reset_randomized(rng_seed, rand: RandomizationConfig, config: GeometryConfig) -> WorldState:
    """Closed door, handle offset and hook pose/twist drawn per ``rand``.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator`` (advanced in
    place). The hook pose is sampled in the randomized handle frame.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    handle_offset = _uniform(rng, rand.handle_offset_range)
    hook_D = _uniform(rng, rand.init_position_range_D)
    rpy = _uniform(rng, rand.init_rpy_range)
    v_B = _uniform(rng, rand.init_linvel_range)
    w_B = _uniform(rng, rand.init_angvel_range)
    return canonical_world(config, hook_D, so3.rpy_to_matrix(rpy), HALF_PI, handle_offset, v_B, w_B)


# ----------------------------------------------------------------------------
# Observation and action
# ----------------------------------------------------------------------------

def relative_quantities(world: WorldState, config: GeometryConfig) -> tuple[Array, Array]:
    """``(B p_hd, R_BD)``: hook-to-handle vector and relative rotation."""
    robot = world.robot
    p_d, R_WD = handle_frame(world.door, config)
    R = robot.orientation_WB
    p_hd = so3.matTvec(R, hook_center(robot, config) - p_d)
    return p_hd, so3.matTmul(R, R_WD)


def observe(world: WorldState, episode: EpisodeConfig, config: GeometryConfig) -> Observation:
    p_hd, R_BD = relative_quantities(world, config)
    flat = R_BD.reshape(R_BD.shape[:-2] + (9,))
    return Observation(np.array(world.robot.linear_velocity_B, dtype=np.float64),
                       np.array(world.robot.angular_velocity_B, dtype=np.float64),
                       p_hd, flat, np.asarray(world.door.angle - episode.alpha_target, dtype=np.float64))


def pose_reference(world: WorldState, offset_D: Array, rot_correction: Array, episode: EpisodeConfig,
                   config: GeometryConfig) -> PoseReference:
    """Pose reference from a handle-frame translation offset and rotation correction.

    With saturation enabled the offset norm is capped at ``max_translation``
    and the commanded attitude is pulled back along the geodesic so it lies
    within ``max_rotation`` of the current attitude.
    """
    robot = world.robot
    _, R_WD = handle_frame(world.door, config)
    offset_D = np.asarray(offset_D, dtype=np.float64)
    if episode.saturation_enabled:
        norm = np.linalg.norm(offset_D, axis=-1, keepdims=True)
        offset_D = offset_D * np.minimum(1.0, episode.max_translation / np.maximum(norm, 1e-300))
    position_ref = robot.position_W + so3.matvec(R_WD, offset_D)
    orientation_ref = so3.matmul(R_WD, rot_correction)
    if episode.saturation_enabled:
        rel = so3.log_so3(so3.matTmul(robot.orientation_WB, orientation_ref))
        angle = np.linalg.norm(rel, axis=-1, keepdims=True)
        rel = rel * np.minimum(1.0, episode.max_rotation / np.maximum(angle, 1e-300))
        orientation_ref = so3.matmul(robot.orientation_WB, so3.exp_so3(rel))
    return PoseReference(position_ref, orientation_ref)


def decode_action(raw: Array, world: WorldState, episode: EpisodeConfig,
                  config: GeometryConfig) -> tuple[PoseReference, ActionCommand]:
    """Map ``[D p_ref, lambda0, lambda1]`` to a pose reference.

    Translation is an offset in the handle frame applied to the current
    position; the Gram-Schmidt rotation is composed with ``R_WD``. Degenerate
    lambda pairs fall back to the identity correction (flagged, never raised).
    """
    raw = np.asarray(raw, dtype=np.float64)
    R_corr, degenerate = so3.gram_schmidt(raw[..., 3:6], raw[..., 6:9])
    ref = pose_reference(world, raw[..., 0:3], R_corr, episode, config)
    return ref, ActionCommand(raw, ref.position_W_ref, ref.orientation_WB_ref, degenerate)


# ----------------------------------------------------------------------------
# Reward
# ----------------------------------------------------------------------------

def reward_from_quantities(hook_to_handle_B: Array, rot_BD: Array, angle: Array, alpha_target,
                           linear_velocity_B: Array, angular_velocity_B: Array, wrench6: Array,
                           episode: EpisodeConfig) -> RewardBreakdown:
    """Reward from the relative quantities it depends on (used by replay too)."""
    dist = np.linalg.norm(hook_to_handle_B, axis=-1)
    theta = so3.geodesic_angle(rot_BD)
    door_err = np.abs(np.asarray(angle) - alpha_target)
    parts = {
        "r_h_dist": -dist,
        "r_h_in": np.where(dist > episode.delta_h_thresh, -1.0, 0.0),
        "r_att": -theta,
        "r_d_dist": -door_err,
        "r_d_open": np.where(door_err > episode.delta_d_thresh, -1.0, 0.0),
        "r_vel_lin": -np.sum(np.square(linear_velocity_B), axis=-1),
        "r_vel_ang": -np.sum(np.square(angular_velocity_B), axis=-1),
        "r_tau": -np.sum(np.square(wrench6), axis=-1),
    }
    total = sum(REWARD_WEIGHTS[k] * v for k, v in parts.items())
    return RewardBreakdown(**parts, total=total)


def compute_reward(world: WorldState, applied: Wrench, episode: EpisodeConfig,
                   config: GeometryConfig) -> RewardBreakdown:
    p_hd, R_BD = relative_quantities(world, config)
    return reward_from_quantities(p_hd, R_BD, world.door.angle, episode.alpha_target,
                                  world.robot.linear_velocity_B, world.robot.angular_velocity_B,
                                  applied.stacked(), episode)


# ----------------------------------------------------------------------------
# Stepping
# ----------------------------------------------------------------------------

def is_success(world: WorldState, episode: EpisodeConfig) -> NDArray[np.bool_]:
    err = np.abs(world.door.angle - episode.alpha_target)
    return (err <= episode.success_band * HALF_PI) & (np.abs(world.door.angular_rate) < episode.success_max_rate)


@dataclass(frozen=True)
class StepInfo:
    success: NDArray[np.bool_]
    timeout: NDArray[np.bool_]
    failure: NDArray[np.bool_]
    wrench: Wrench
    command: ActionCommand


def env_step(world: WorldState, raw_action: Array, episode: EpisodeConfig, gains: PoseGains,
             config: GeometryConfig, backend: str = "compiled"):
    """Advance one control tick.

    ``backend="numpy"`` runs the reference implementation instead of the
    compiled kernels; both agree to rounding.

    Returns ``(next_world, observation, reward, done, info)``. Entries whose
    physics blows up keep their previous state and finish as failures.
    """
    ref, command = decode_action(raw_action, world, episode, config)
    dt = episode.physics_dt
    if backend == "compiled":
        nxt, wrench = kernels.advance_world(world, ref, gains, config, dt, episode.physics_substeps)
    elif backend == "numpy":
        nxt = world
        with np.errstate(all="ignore"):
            for _ in range(episode.physics_substeps):
                wrench = compute_wrench(nxt.robot, ref, gains, config)
                nxt = step_world(nxt, wrench, config, dt, check_finite=False)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    failure = ~(robot_state_finite(nxt.robot) & np.isfinite(nxt.door.angle) & np.isfinite(nxt.door.angular_rate))
    if np.any(failure):
        nxt = where_world(failure, world, nxt) if failure.ndim else world
        wrench = Wrench(np.where(failure[..., None], 0.0, wrench.force_B),
                        np.where(failure[..., None], 0.0, wrench.torque_B))
    reward = compute_reward(nxt, wrench, episode, config)
    success = is_success(nxt, episode) & ~failure
    timeout = (nxt.time >= episode.max_episode_seconds - 1e-9) & ~success & ~failure
    done = success | timeout | failure
    obs = observe(nxt, episode, config)
    return nxt, obs, reward, done, StepInfo(success, timeout, failure, wrench, command)


# ----------------------------------------------------------------------------
# Vectorized episodes
# ----------------------------------------------------------------------------

class DoorEnv:
    """A batch of independent door-opening episodes with auto-reset.

    Environment ``i`` draws its resets from ``default_rng(seed + i)``.
    ``reset_fn(rng) -> WorldState`` overrides the randomized reset.
    """

    def __init__(self, num_envs: int, seed: int, episode: EpisodeConfig | None = None,
                 gains: PoseGains | None = None, config: GeometryConfig | None = None,
                 rand: RandomizationConfig | None = None, reset_fn=None) -> None:
        self.num_envs = num_envs
        self.episode = episode or EpisodeConfig()
        self.gains = gains or PoseGains()
        self.config = config or GeometryConfig()
        self.rand = rand or RandomizationConfig()
        self.rngs = [np.random.default_rng(seed + i) for i in range(num_envs)]
        self._reset_fn = reset_fn or (lambda rng: reset_randomized(rng, self.rand, self.config))
        self.world: WorldState | None = None
        self.episode_return = np.zeros(num_envs)
        self.episode_length = np.zeros(num_envs, dtype=np.int64)

    def reset(self) -> Array:
        self.world = stack_worlds([self._reset_fn(rng) for rng in self.rngs])
        self.episode_return[:] = 0.0
        self.episode_length[:] = 0
        return observe(self.world, self.episode, self.config).vector

    def observation(self) -> Array:
        return observe(self.world, self.episode, self.config).vector

    def step(self, actions: Array):
        """Step all envs; returns ``(obs, reward, done, info)``.

        ``info`` carries ``final_obs`` (observation before auto-reset),
        ``success``/``timeout``/``failure`` masks and a list of finished
        episodes as ``(env_index, return, length, success)``.
        """
        nxt, obs, reward, done, info = env_step(self.world, actions, self.episode, self.gains, self.config)
        total = reward.total
        self.episode_return += total
        self.episode_length += 1
        final_obs = obs.vector
        finished = []
        next_obs = final_obs
        if np.any(done):
            fresh = []
            for i in range(self.num_envs):
                if done[i]:
                    finished.append((i, float(self.episode_return[i]), int(self.episode_length[i]),
                                     bool(info.success[i])))
                    self.episode_return[i] = 0.0
                    self.episode_length[i] = 0
                    fresh.append(self._reset_fn(self.rngs[i]))
                else:
                    fresh.append(None)
            template = stack_worlds([f if f is not None else index_world(nxt, i) for i, f in enumerate(fresh)])
            nxt = where_world(done, template, nxt)
            next_obs = observe(nxt, self.episode, self.config).vector
        self.world = nxt
        return next_obs, total, done, {
            "final_obs": final_obs,
            "success": info.success,
            "timeout": info.timeout,
            "failure": info.failure,
            "finished": finished,
            "reward": reward,
            "wrench": info.wrench,
        }


# ----------------------------------------------------------------------------
# Traces
# ----------------------------------------------------------------------------

TRACE_COLUMNS = (
    ["time", "alpha", "alpha_rate", "alpha_target"]
    + [f"force_{a}" for a in "xyz"] + [f"torque_{a}" for a in "xyz"]
    + [f"lin_vel_{a}" for a in "xyz"] + [f"ang_vel_{a}" for a in "xyz"]
    + [f"p_hd_{a}" for a in "xyz"] + [f"rot_bd_{i}{j}" for i in range(3) for j in range(3)]
    + list(REWARD_WEIGHTS) + ["total"]
)


def trace_row(world: WorldState, wrench: Wrench, reward: RewardBreakdown, episode: EpisodeConfig,
              config: GeometryConfig) -> list[float]:
    """One unbatched trace row in :data:`TRACE_COLUMNS` order."""
    p_hd, R_BD = relative_quantities(world, config)
    values = [world.time, world.door.angle, world.door.angular_rate, episode.alpha_target,
              *wrench.force_B, *wrench.torque_B, *world.robot.linear_velocity_B,
              *world.robot.angular_velocity_B, *p_hd, *R_BD.reshape(9),
              *(reward.components()[k] for k in REWARD_WEIGHTS), reward.total]
    return [float(v) for v in values]


def write_trace(path, rows) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def rollout_trace(world: WorldState, controller, episode: EpisodeConfig, gains: PoseGains,
                  config: GeometryConfig, max_steps: int | None = None) -> list[list[float]]:
    """Run an unbatched episode with ``controller(world, obs) -> raw action``."""
    rows = []
    obs = observe(world, episode, config)
    steps = max_steps or int(round(episode.max_episode_seconds * episode.control_rate_hz))
    for _ in range(steps):
        world, obs, reward, done, info = env_step(world, controller(world, obs), episode, gains, config)
        rows.append(trace_row(world, info.wrench, reward, episode, config))
        if done:
            break
    return rows
