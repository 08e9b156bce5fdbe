"""Robustness sweeps and the door-closing check for the policy and MPPI.

Every trial of a sweep value runs in one batch. Trial ``i`` draws its
initial state from ``default_rng([seed, i])`` regardless of the sweep value,
so the physics starts identically across values and only the quantity being
swept differs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from omav_door import rotations as so3
from omav_door.control import PoseGains
from omav_door.env import (EpisodeConfig, Observation, RandomizationConfig, canonical_world, env_step,
                           is_success, observe, reset_randomized, trace_row, write_trace)
from omav_door.mppi import MppiConfig, MppiController
from omav_door.policy import Agent, load_checkpoint
from omav_door.world import HALF_PI, GeometryConfig, WorldState, index_world, stack_worlds, where_world

Array = NDArray[np.float64]

EXPERIMENT_KINDS = ("initial_distance", "lateral_offset", "vertical_offset", "door_closing")
RESULT_COLUMNS = ("experiment", "value", "trials", "successes", "success_rate", "mean_time_s", "std_time_s")

DEFAULT_SWEEPS = {
    "initial_distance": tuple(round(0.2 * i, 10) for i in range(8)),
    "lateral_offset": tuple(round(-0.12 + 0.03 * i, 10) for i in range(9)),
    "vertical_offset": tuple(round(-0.12 + 0.03 * i, 10) for i in range(9)),
    "door_closing": (0.0,),
}


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    """One sweep.

    ``controller`` is ``"policy"`` (needs ``checkpoint``) or ``"mppi"``.
    ``values`` defaults to the kind's standard grid. For the offset sweeps
    and door closing ``values`` are offsets in metres along ``y_D`` / ``z_D``
    (door closing uses ``value`` as a lateral offset, normally 0).
    """

    kind: str
    values: tuple = ()
    trials_per_value: int = 20
    timeout_seconds: float = 60.0
    success_band: float = 0.1
    controller: str = "policy"
    checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {EXPERIMENT_KINDS}")
        values = tuple(float(v) for v in (self.values or DEFAULT_SWEEPS[self.kind]))
        object.__setattr__(self, "values", values)
        if not values:
            raise ValueError("sweep values must be non-empty")
        if self.trials_per_value < 1:
            raise ValueError("trials_per_value must be at least 1")
        if not self.timeout_seconds > 0 or not self.success_band > 0:
            raise ValueError("timeout_seconds and success_band must be positive")
        if self.controller not in ("policy", "mppi"):
            raise ValueError(f"unknown controller {self.controller!r}")


@dataclass(frozen=True)
class TrialResult:
    success: bool
    completion_time: float  # nan unless success
    final_angle: float
    trace_path: str | None = None


@dataclass(frozen=True)
class SweepRow:
    experiment: str
    value: float
    trials: int
    successes: int
    success_rate: float
    mean_time_s: float
    std_time_s: float
    results: tuple = field(default=(), compare=False)

    def csv_fields(self) -> list[str]:
        return [self.experiment, repr(self.value), str(self.trials), str(self.successes),
                repr(self.success_rate), repr(self.mean_time_s), repr(self.std_time_s)]


def apply_observation_offset(obs: Observation, offset_D) -> Observation:
    """Observation as if the handle sat ``offset_D`` further along frame D.

    Only ``hook_to_handle_B`` changes: ``p_hd - R_BD @ offset_D``.
    """
    offset_D = np.asarray(offset_D, dtype=np.float64)
    R_BD = obs.rot_BD_flat.reshape(obs.rot_BD_flat.shape[:-1] + (3, 3))
    shift = so3.matvec(R_BD, np.broadcast_to(offset_D, obs.hook_to_handle_B.shape))
    return replace(obs, hook_to_handle_B=obs.hook_to_handle_B - shift)


def offset_for(kind: str, value: float) -> Array:
    if kind == "lateral_offset" or kind == "door_closing":
        return np.array([0.0, value, 0.0])
    if kind == "vertical_offset":
        return np.array([0.0, 0.0, value])
    return np.zeros(3)


def front_hemisphere_direction(rng: np.random.Generator) -> Array:
    """Uniform unit vector with ``x_D <= 0`` (the robot side of the door)."""
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            v = v / n
            v[0] = -abs(v[0])
            return v


def initial_world(kind: str, value: float, trial_seed, rand: RandomizationConfig,
                  config: GeometryConfig) -> WorldState:
    """Start state of one trial (the draw order is fixed per kind)."""
    rng = np.random.default_rng(trial_seed)
    if kind in ("lateral_offset", "vertical_offset"):
        return reset_randomized(rng, rand, config)
    rpy = rng.uniform(rand.init_rpy_range[:, 0], rand.init_rpy_range[:, 1])
    if kind == "door_closing":
        return canonical_world(config, (0.0, 0.0, 0.0), so3.rpy_to_matrix(rpy), angle=0.0)
    direction = front_hemisphere_direction(rng)
    return canonical_world(config, value * direction, so3.rpy_to_matrix(rpy))


def episode_for(kind: str, episode: EpisodeConfig, spec: ExperimentSpec) -> EpisodeConfig:
    target = HALF_PI if kind == "door_closing" else episode.alpha_target
    return replace(episode, alpha_target=target, max_episode_seconds=spec.timeout_seconds,
                   success_band=spec.success_band)


# ----------------------------------------------------------------------------
# Controllers
# ----------------------------------------------------------------------------

class PolicyTrials:
    """Deterministic (mean-action) policy; the handle offset enters via the observation."""

    def __init__(self, agent: Agent) -> None:
        self.agent = agent

    def start(self, n: int, offset_D: Array, seeds: list, episode: EpisodeConfig) -> None:
        self.offset_D = offset_D

    def act(self, world: WorldState, obs: Observation, active: NDArray[np.bool_]) -> Array:
        return self.agent.mean_action(apply_observation_offset(obs, self.offset_D).vector)


def mppi_raw_action(control: Array) -> Array:
    """9-dim action reproducing an MPPI control through the policy's decoder."""
    rot = so3.exp_so3(control[3:6])
    return np.concatenate([control[0:3], rot[:, 0], rot[:, 1]])


class MppiTrials:
    """One :class:`MppiController` per trial; the offset shifts its internal model."""

    def __init__(self, cfg: MppiConfig, config: GeometryConfig, gains: PoseGains) -> None:
        self.cfg, self.config, self.gains = cfg, config, gains

    def start(self, n: int, offset_D: Array, seeds: list, episode: EpisodeConfig) -> None:
        self.controllers = [MppiController(self.cfg, s, self.config, self.gains, episode, offset_D)
                            for s in seeds]

    def act(self, world: WorldState, obs: Observation, active: NDArray[np.bool_]) -> Array:
        raw = np.zeros((len(self.controllers), 9))
        raw[:, 3] = raw[:, 7] = 1.0
        for i, ctrl in enumerate(self.controllers):
            if active[i]:
                raw[i] = mppi_raw_action(ctrl.control(index_world(world, i)))
        return raw


class ScriptedTrials:
    """Wraps ``fn(world, obs) -> raw (n, 9)``; used for stubs and demos."""

    def __init__(self, fn) -> None:
        self.fn = fn

    def start(self, n: int, offset_D: Array, seeds: list, episode: EpisodeConfig) -> None:
        self.offset_D = offset_D

    def act(self, world: WorldState, obs: Observation, active: NDArray[np.bool_]) -> Array:
        return np.asarray(self.fn(world, apply_observation_offset(obs, self.offset_D)), dtype=np.float64)


def hook_and_pull(world: WorldState, obs: Observation, pull: float = 0.1, capture: float = 0.03) -> Array:
    """Scripted baseline: steer the hook onto the handle, then pull along ``-x_D``.

    Works on single or batched observations and keeps the attitude aligned
    with the handle frame.
    """
    R_BD = obs.rot_BD_flat.reshape(obs.rot_BD_flat.shape[:-1] + (3, 3))
    err_D = so3.matTvec(R_BD, obs.hook_to_handle_B)
    raw = np.zeros(err_D.shape[:-1] + (9,))
    raw[..., 0:3] = -err_D
    raw[..., 0] -= np.where(np.linalg.norm(err_D, axis=-1) < capture, pull, 0.0)
    raw[..., 3] = 1.0
    raw[..., 7] = 1.0
    return raw


# ----------------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------------

def run_trials(kind: str, value: float, controller, spec: ExperimentSpec, config: GeometryConfig,
               gains: PoseGains, episode: EpisodeConfig, rand: RandomizationConfig,
               trace_dir: Path | None = None) -> list[TrialResult]:
    """All trials of one sweep value, stepped as a batch until success or timeout."""
    n = spec.trials_per_value
    ep = episode_for(kind, episode, spec)
    seeds = [[spec.seed, i] for i in range(n)]
    world = stack_worlds([initial_world(kind, value, s, rand, config) for s in seeds])
    controller.start(n, offset_for(kind, value), [[spec.seed, i, 1] for i in range(n)], ep)
    active = np.ones(n, dtype=bool)
    done_time = np.full(n, math.nan)
    succeeded = np.zeros(n, dtype=bool)
    rows: list[list] = [[] for _ in range(n)]
    max_steps = int(round(spec.timeout_seconds * ep.control_rate_hz))
    obs = observe(world, ep, config)
    for _ in range(max_steps):
        raw = controller.act(world, obs, active)
        nxt, obs_next, reward, _, info = env_step(world, raw, ep, gains, config)
        if trace_dir is not None:
            for i in np.flatnonzero(active):
                rows[i].append(trace_row(index_world(nxt, i), type(info.wrench)(info.wrench.force_B[i],
                                         info.wrench.torque_B[i]), _index_reward(reward, i), ep, config))
        world = where_world(active, nxt, world)
        obs = observe(world, ep, config)
        newly = active & is_success(world, ep) & ~info.failure
        done_time[newly] = world.time[newly]
        succeeded |= newly
        active &= ~(newly | info.failure)
        if not active.any():
            break
    results = []
    for i in range(n):
        path = None
        if trace_dir is not None:
            path = str(Path(trace_dir) / f"{kind}_{value!r}_{i:03d}.csv")
            write_trace(path, rows[i])
        results.append(TrialResult(bool(succeeded[i]), float(done_time[i]), float(world.door.angle[i]), path))
    return results


def _index_reward(reward, i):
    return type(reward)(**{k: np.asarray(v)[i] for k, v in reward.__dict__.items()})


def summarize(kind: str, value: float, results: list[TrialResult]) -> SweepRow:
    times = np.array([r.completion_time for r in results if r.success])
    successes = len(times)
    mean = float(times.mean()) if successes else math.nan
    std = float(times.std()) if successes else math.nan
    return SweepRow(kind, float(value), len(results), successes, successes / len(results), mean, std,
                    tuple(results))


def make_controller(spec: ExperimentSpec, config: GeometryConfig, gains: PoseGains,
                    mppi: MppiConfig | None = None, agent: Agent | None = None):
    if spec.controller == "mppi":
        return MppiTrials(mppi or MppiConfig(), config, gains)
    if agent is None:
        if spec.checkpoint is None:
            raise EvaluationError("policy evaluation needs a checkpoint")
        path = Path(spec.checkpoint)
        if not path.is_file():
            raise EvaluationError(f"checkpoint not found: {path}")
        try:
            agent, _ = load_checkpoint(path)
        except Exception as exc:  # any unreadable file, not just missing keys
            raise EvaluationError(f"cannot read checkpoint {path}: {exc}") from exc
    return PolicyTrials(agent)


def run_sweep(spec: ExperimentSpec, config: GeometryConfig | None = None, gains: PoseGains | None = None,
              episode: EpisodeConfig | None = None, rand: RandomizationConfig | None = None,
              mppi: MppiConfig | None = None, controller=None, trace_dir=None,
              progress=None) -> list[SweepRow]:
    """Run every value of ``spec`` and return one row per value.

    ``controller`` overrides the one built from ``spec`` (anything with the
    ``start`` / ``act`` interface). The checkpoint is loaded before any trial.
    """
    config = config or GeometryConfig()
    gains = gains or PoseGains()
    episode = episode or EpisodeConfig()
    rand = rand or RandomizationConfig()
    if controller is None:
        controller = make_controller(spec, config, gains, mppi)
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for value in spec.values:
        results = run_trials(spec.kind, value, controller, spec, config, gains, episode, rand,
                             Path(trace_dir) if trace_dir is not None else None)
        rows.append(summarize(spec.kind, value, results))
        if progress is not None:
            progress(rows[-1])
    return rows


def write_results(path, rows: list[SweepRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_fields())


def read_results(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
