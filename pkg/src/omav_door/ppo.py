"""Clipped-surrogate PPO with GAE over a batch of environments."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from omav_door.env import DoorEnv
from omav_door.policy import Agent, LossSpec, Minibatch, ppo_loss, save_checkpoint

Array = NDArray[np.float64]
log = logging.getLogger(__name__)

METRICS_COLUMNS = ["update", "env_steps", "episodes", "mean_return", "success_rate", "policy_loss",
                   "value_loss", "entropy", "clip_fraction", "approx_kl", "learning_rate", "aborted"]


@dataclass(frozen=True)
class PpoConfig:
    num_envs: int = 16
    steps_per_env: int = 512
    epochs: int = 5
    minibatch_size: int = 2048
    clip_ratio: float = 0.2
    gamma: float = 0.995
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 1e-3
    max_grad_norm: float = 1.0
    total_steps: int = 3_000_000
    reward_scale: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 50

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma must lie in (0, 1] and gae_lambda in [0, 1]")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if self.num_envs < 1 or self.steps_per_env < 1 or self.minibatch_size < 1:
            raise ValueError("batch sizes must be positive")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.steps_per_env

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.clip_ratio, self.value_coef, self.entropy_coef)


@dataclass
class RolloutBuffer:
    """Arrays of shape ``(steps, envs, ...)``; ``obs`` is stored normalized."""

    obs: Array
    actions: Array
    logprob: Array
    rewards: Array
    values: Array
    dones: Array
    last_value: Array
    advantages: Array | None = None
    returns: Array | None = None
    episodes: list | None = None

    @property
    def steps(self) -> int:
        return self.rewards.shape[0]

    def flat(self) -> dict[str, Array]:
        n = self.rewards.size
        return {
            "obs": self.obs.reshape(n, -1),
            "actions": self.actions.reshape(n, -1),
            "logprob": self.logprob.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


# ----------------------------------------------------------------------------
# Rollouts and advantages
# ----------------------------------------------------------------------------

def collect_rollouts(agent: Agent, env, steps: int, rng: np.random.Generator, obs: Array,
                     reward_scale: float = 1.0, gamma: float = 0.995,
                     policy_fn: Callable | None = None) -> tuple[RolloutBuffer, Array]:
    """Run ``steps`` ticks on every env, starting from raw observations ``obs``.

    Timeouts are treated as truncations: the discounted value of the final
    observation is folded into that step's reward before the episode is
    marked done. ``policy_fn(norm_obs, rng) -> (actions, logprob)`` replaces
    the stochastic policy (used for scripted checks).
    Returns the buffer and the raw observation to continue from.
    """
    n = obs.shape[0]
    obs_dim = obs.shape[1]
    buf_obs = np.zeros((steps, n, obs_dim))
    buf_act = np.zeros((steps, n, agent.policy.log_std.shape[0]))
    buf_logp = np.zeros((steps, n))
    buf_rew = np.zeros((steps, n))
    buf_val = np.zeros((steps, n))
    buf_done = np.zeros((steps, n))
    episodes = []
    act = policy_fn or agent.act_normalized
    for t in range(steps):
        agent.normalizer.update(obs)
        norm_obs = agent.normalizer(obs)
        actions, logp = act(norm_obs, rng)
        values = agent.value_of_normalized(norm_obs)
        next_obs, reward, done, info = env.step(actions)
        reward = reward_scale * np.asarray(reward, dtype=np.float64)
        timeout = np.asarray(info.get("timeout", np.zeros(n, dtype=bool)))
        if np.any(timeout):
            final_values = agent.value_of(info["final_obs"])
            reward = reward + gamma * np.where(timeout, final_values, 0.0)
        buf_obs[t], buf_act[t], buf_logp[t] = norm_obs, actions, logp
        buf_rew[t], buf_val[t], buf_done[t] = reward, values, done
        episodes.extend(info.get("finished", []))
        obs = next_obs
    last_value = agent.value_of(obs)
    buf = RolloutBuffer(buf_obs, buf_act, buf_logp, buf_rew, buf_val, buf_done, last_value, episodes=episodes)
    return buf, obs


def compute_gae(rewards: Array, values: Array, dones: Array, last_value: Array, gamma: float,
                lam: float) -> tuple[Array, Array]:
    """Generalized advantage estimation along axis 0.

    ``dones[t]`` marks that the episode ended at step ``t`` (no bootstrap
    through it). Returns ``(advantages, returns)`` with
    ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_value, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def add_advantages(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    buffer.advantages, buffer.returns = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                                                    buffer.last_value, gamma, lam)
    return buffer


def normalize_advantages(adv: Array) -> Array:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ----------------------------------------------------------------------------
# Update
# ----------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Array], lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[Array], grads: list[Array]) -> None:
        """In-place update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def snapshot(self):
        return [m.copy() for m in self.m], [v.copy() for v in self.v], self.t

    def restore(self, snap) -> None:
        self.m, self.v, self.t = [m.copy() for m in snap[0]], [v.copy() for v in snap[1]], snap[2]


def clip_grad_norm(grads: list[Array], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    aborted: bool = False


def ppo_update(agent: Agent, buffer: RolloutBuffer, cfg: PpoConfig, optimizer: Adam,
               rng: np.random.Generator) -> UpdateStats:
    """Run ``cfg.epochs`` passes of minibatch updates on ``agent`` in place.

    A non-finite loss or gradient aborts the whole update: parameters and
    optimizer state are restored and ``aborted`` is set.
    """
    data = buffer.flat()
    data["advantages"] = normalize_advantages(data["advantages"])
    n = data["obs"].shape[0]
    mb = min(cfg.minibatch_size, n)
    spec = cfg.loss_spec()
    backup = agent.copy()
    opt_backup = optimizer.snapshot()
    params = agent.policy.arrays() + agent.value.arrays()
    totals = np.zeros(5)
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start:start + mb]
            batch = Minibatch(data["obs"][idx], data["actions"][idx], data["logprob"][idx],
                              data["advantages"][idx], data["returns"][idx])
            res = ppo_loss(agent.policy, agent.value, batch, spec)
            grads = res.policy_grads + res.value_grads
            if not (np.isfinite(res.loss) and all(np.all(np.isfinite(g)) for g in grads)):
                agent.policy, agent.value = backup.policy, backup.value
                optimizer.restore(opt_backup)
                log.warning("non-finite PPO loss; update aborted")
                return UpdateStats(math.nan, math.nan, math.nan, math.nan, math.nan, aborted=True)
            clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer.step(params, grads)
            totals += [res.policy_loss, res.value_loss, res.entropy, res.clip_fraction, res.approx_kl]
            count += 1
    totals /= max(count, 1)
    return UpdateStats(*totals.tolist())


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------

def split_seed(seed: int, n: int) -> list[int]:
    """Fixed derivation of ``n`` independent sub-seeds from one seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def default_env_factory(num_envs: int, seed: int) -> DoorEnv:
    return DoorEnv(num_envs, seed)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def train_loop(cfg: PpoConfig, env_factory: Callable = default_env_factory, out_dir=None,
               agent: Agent | None = None, metadata: dict | None = None) -> tuple[Agent, list[dict]]:
    """Alternate rollout collection and PPO updates until ``cfg.total_steps``.

    With ``out_dir`` set, writes ``metrics.csv`` (columns
    :data:`METRICS_COLUMNS`), periodic ``checkpoint_XXXXX.npz`` and a final
    ``final.npz``. Returns the trained agent and the metric rows.
    """
    init_seed, env_seed, act_seed, shuffle_seed = split_seed(cfg.seed, 4)
    agent = agent or Agent.initial(init_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata or {}, ppo=asdict(cfg))
    rows: list[dict] = []
    updates = cfg.total_steps // cfg.batch_size
    if updates == 0:
        if out is not None:
            save_checkpoint(out / "final.npz", agent, meta)
            _write_metrics(out / "metrics.csv", rows)
        return agent, rows

    env = env_factory(cfg.num_envs, env_seed % (2**31))
    act_rng = np.random.default_rng(act_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    optimizer = Adam(agent.policy.arrays() + agent.value.arrays(), cfg.learning_rate)
    obs = env.reset()
    aborts = 0
    for update in range(1, updates + 1):
        buffer, obs = collect_rollouts(agent, env, cfg.steps_per_env, act_rng, obs,
                                       cfg.reward_scale, cfg.gamma)
        add_advantages(buffer, cfg.gamma, cfg.gae_lambda)
        stats = ppo_update(agent, buffer, cfg, optimizer, shuffle_rng)
        eps = buffer.episodes or []
        row = {
            "update": update,
            "env_steps": update * cfg.batch_size,
            "episodes": len(eps),
            "mean_return": float(np.mean([e[1] for e in eps])) if eps else math.nan,
            "success_rate": float(np.mean([e[3] for e in eps])) if eps else math.nan,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "clip_fraction": stats.clip_fraction,
            "approx_kl": stats.approx_kl,
            "learning_rate": optimizer.lr,
            "aborted": stats.aborted,
        }
        rows.append(row)
        log.info("update %d/%d return %.4g success %.2f kl %.4f", update, updates, row["mean_return"],
                 row["success_rate"], row["approx_kl"])
        if stats.aborted:
            aborts += 1
            if aborts > 1:
                log.error("second aborted update; stopping training")
                break
            optimizer.lr *= 0.5
        if out is not None:
            _write_metrics(out / "metrics.csv", rows)
            if cfg.checkpoint_every and update % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{update:05d}.npz", agent, meta)
    agent.normalizer.frozen = True
    if out is not None:
        save_checkpoint(out / "final.npz", agent, meta)
    return agent, rows


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
