"""Information-theoretic MPPI over handle-frame pose offsets.

A control is a 6-vector ``[translation offset (3), rotation vector (3)]``,
both expressed in the handle frame D, held for ``control_dt`` seconds. It
drives the same pose controller and simulator used for training, stepped at
the coarser ``rollout_dt`` inside rollouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from omav_door import kernels
from omav_door import rotations as so3
from omav_door.control import PoseGains, compute_wrench
from omav_door.env import REWARD_WEIGHTS, EpisodeConfig, compute_reward, pose_reference
from omav_door.world import GeometryConfig, WorldState, robot_state_finite, stack_worlds, step_world

Array = NDArray[np.float64]

BLOWUP_COST = 1e9
CONTROL_DIM = 6


@dataclass(frozen=True)
class MppiConfig:
    horizon_steps: int = 15
    control_dt: float = 0.1
    rollout_dt: float = 0.01
    num_samples: int = 64
    temperature: float = 50.0
    noise_std: tuple = (0.05, 0.05, 0.05, 0.05, 0.05, 0.05)
    smoothing: float = 0.0
    cost_weights: dict = field(default_factory=lambda: dict(REWARD_WEIGHTS))
    terminal_weight: float = REWARD_WEIGHTS["r_d_dist"]

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if len(self.noise_std) != CONTROL_DIM:
            raise ValueError("noise_std needs one entry per control dimension")
        unknown = sorted(set(self.cost_weights) - set(REWARD_WEIGHTS))
        if unknown:
            raise ValueError(f"unknown cost weight keys: {unknown}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        if not 0.0 < self.rollout_dt <= min(self.control_dt, 0.01):
            raise ValueError("rollout_dt must lie in (0, min(control_dt, 0.01)]")

    @property
    def substeps(self) -> int:
        return max(1, int(round(self.control_dt / self.rollout_dt)))


def zero_sequence(cfg: MppiConfig) -> Array:
    return np.zeros((cfg.horizon_steps, CONTROL_DIM))


def saturate_controls(seq: Array, episode: EpisodeConfig) -> Array:
    """Cap translation and rotation-vector norms at the policy's saturation caps."""
    if not episode.saturation_enabled:
        return seq
    out = np.array(seq, dtype=np.float64)
    for sl, cap in ((slice(0, 3), episode.max_translation), (slice(3, 6), episode.max_rotation)):
        norm = np.linalg.norm(out[..., sl], axis=-1, keepdims=True)
        out[..., sl] *= np.minimum(1.0, cap / np.maximum(norm, 1e-300))
    return out


def _broadcast_world(world: WorldState, n: int) -> WorldState:
    if world.batch_shape == (n,):
        return world
    return stack_worlds([world] * n)


def weighted_cost(reward, weights: dict) -> Array:
    parts = reward.components()
    return -sum(weights[k] * parts[k] for k in weights)


def rollout_cost(world: WorldState, seq: Array, config: GeometryConfig, gains: PoseGains,
                 episode: EpisodeConfig, cfg: MppiConfig, backend: str = "compiled") -> Array:
    """Cost of control sequence(s) ``seq`` of shape ``(H, 6)`` or ``(K, H, 6)``.

    The cost is the negated weighted reward summed at every control step plus
    ``terminal_weight * |alpha - alpha_target| * H`` at the end. Rollouts
    that blow up cost :data:`BLOWUP_COST`. ``world`` must be unbatched for
    the compiled backend; ``backend="numpy"`` is the reference path.
    """
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    seqs = seq[None] if single else seq
    if backend == "compiled" and world.batch_shape == ():
        r, d = world.robot, world.door
        weights = np.array([cfg.cost_weights.get(k, 0.0) for k in REWARD_WEIGHTS])
        cost = kernels.rollout_costs(
            np.array(r.position_W, dtype=np.float64), np.array(r.orientation_WB, dtype=np.float64),
            np.array(r.linear_velocity_B, dtype=np.float64), np.array(r.angular_velocity_B, dtype=np.float64),
            float(d.angle), float(d.angular_rate), np.array(d.handle_offset_D, dtype=np.float64),
            np.ascontiguousarray(seqs), cfg.substeps, cfg.rollout_dt, kernels.pack_geometry(config),
            kernels.pack_gains(gains), kernels.pack_episode(episode), weights, float(cfg.terminal_weight),
            BLOWUP_COST)
        return cost[0] if single else cost
    if backend not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    k, horizon = seqs.shape[:2]
    w = _broadcast_world(world, k)
    cost = np.zeros(k)
    alive = np.ones(k, dtype=bool)
    with np.errstate(all="ignore"):
        for h in range(horizon):
            u = seqs[:, h]
            rot = so3.exp_so3(u[:, 3:6])
            for _ in range(cfg.substeps):
                ref = pose_reference(w, u[:, 0:3], rot, episode, config)
                wrench = compute_wrench(w.robot, ref, gains, config)
                w = step_world(w, wrench, config, cfg.rollout_dt, check_finite=False)
            alive &= robot_state_finite(w.robot) & np.isfinite(w.door.angle)
            cost += weighted_cost(compute_reward(w, wrench, episode, config), cfg.cost_weights)
        cost += cfg.terminal_weight * np.abs(w.door.angle - episode.alpha_target) * horizon
    cost = np.where(alive & np.isfinite(cost), cost, BLOWUP_COST)
    return cost[0] if single else cost


def softmin_weights(costs: Array, temperature: float) -> Array:
    shifted = (costs - np.min(costs)) / temperature
    w = np.exp(-shifted)
    return w / np.sum(w)


@dataclass
class MppiStepInfo:
    costs: Array
    weights: Array
    min_cost: float
    mean_cost: float
    weighted_cost: float
    effective_sample_size: float
    all_blown_up: bool


def mppi_step(world: WorldState, nominal: Array, cfg: MppiConfig, rng: np.random.Generator,
              config: GeometryConfig | None = None, gains: PoseGains | None = None,
              episode: EpisodeConfig | None = None) -> tuple[Array, Array, MppiStepInfo]:
    """One MPPI replanning step.

    Returns ``(control for now, shifted nominal, diagnostics)``.
    """
    config = config or GeometryConfig()
    gains = gains or PoseGains()
    episode = episode or EpisodeConfig()
    std = np.asarray(cfg.noise_std, dtype=np.float64)
    noise = rng.standard_normal((cfg.num_samples,) + nominal.shape) * std
    samples = saturate_controls(nominal[None] + noise, episode)
    costs = rollout_cost(world, samples, config, gains, episode, cfg)
    if np.all(costs >= BLOWUP_COST):
        info = MppiStepInfo(costs, np.full(cfg.num_samples, 1.0 / cfg.num_samples), float(BLOWUP_COST),
                            float(BLOWUP_COST), float(BLOWUP_COST), 0.0, True)
        return np.zeros(CONTROL_DIM), nominal.copy(), info
    weights = softmin_weights(costs, cfg.temperature)
    updated = np.einsum("k,khd->hd", weights, samples)
    updated = cfg.smoothing * nominal + (1.0 - cfg.smoothing) * updated
    action = updated[0].copy()
    shifted = np.concatenate([updated[1:], updated[-1:]], axis=0)
    info = MppiStepInfo(costs, weights, float(costs.min()), float(costs.mean()),
                        float(np.dot(weights, costs)), float(1.0 / np.sum(weights**2)), False)
    return action, shifted, info


class MppiController:
    """Stateful wrapper replanning every ``control_dt`` seconds.

    ``model_offset_D`` shifts the handle in the controller's internal model,
    which is how observation errors reach MPPI in the robustness sweeps.
    """

    def __init__(self, cfg: MppiConfig, seed: int, config: GeometryConfig, gains: PoseGains,
                 episode: EpisodeConfig, model_offset_D=(0.0, 0.0, 0.0)) -> None:
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.config, self.gains, self.episode = config, gains, episode
        self.model_offset_D = np.asarray(model_offset_D, dtype=np.float64)
        self.nominal = zero_sequence(cfg)
        self.current = np.zeros(CONTROL_DIM)
        self.next_replan = 0.0
        self.diagnostics: list[MppiStepInfo] = []

    def perceived(self, world: WorldState) -> WorldState:
        door = replace(world.door, handle_offset_D=world.door.handle_offset_D + self.model_offset_D)
        return replace(world, door=door)

    def control(self, world: WorldState) -> Array:
        """The held 6-vector control, replanning when it is due."""
        if float(world.time) >= self.next_replan - 1e-9:
            self.current, self.nominal, info = mppi_step(self.perceived(world), self.nominal, self.cfg,
                                                         self.rng, self.config, self.gains, self.episode)
            self.diagnostics.append(info)
            self.next_replan = float(world.time) + self.cfg.control_dt
        return self.current
