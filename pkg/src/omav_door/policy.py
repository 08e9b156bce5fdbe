"""Gaussian MLP policy and value network with hand-written backprop.

Both networks are plain ReLU MLPs stored as lists of ``(W, b)`` with
``W`` of shape ``(fan_in, fan_out)`` so a batch ``x`` of shape ``(n, fan_in)``
maps through ``x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from omav_door.env import ACT_DIM, OBS_DIM

Array = NDArray[np.float64]

HIDDEN = (256, 256, 256)
CHECKPOINT_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))
# mean action that decodes to "no translation, identity rotation correction"
NEUTRAL_ACTION = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class MLP:
    weights: list[Array]
    biases: list[Array]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[Array]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class PolicyParameters:
    net: MLP
    log_std: Array

    def arrays(self) -> list[Array]:
        return self.net.arrays() + [self.log_std]

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.net.copy(), self.log_std.copy())


@dataclass
class ValueParameters:
    net: MLP

    def arrays(self) -> list[Array]:
        return self.net.arrays()

    def copy(self) -> "ValueParameters":
        return ValueParameters(self.net.copy())


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> Array:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(rng: np.random.Generator, sizes, out_gain: float) -> MLP:
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else np.sqrt(2.0)
        weights.append(orthogonal(rng, fan_in, fan_out, gain))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def init_policy(rng: np.random.Generator, log_std: float = np.log(0.5)) -> PolicyParameters:
    net = init_mlp(rng, (OBS_DIM, *HIDDEN, ACT_DIM), out_gain=0.01)
    net.biases[-1][:] = NEUTRAL_ACTION
    return PolicyParameters(net, np.full(ACT_DIM, log_std))


def init_value(rng: np.random.Generator) -> ValueParameters:
    return ValueParameters(init_mlp(rng, (OBS_DIM, *HIDDEN, 1), out_gain=1.0))


# ----------------------------------------------------------------------------
# Forward / backward
# ----------------------------------------------------------------------------

def mlp_forward(net: MLP, x: Array) -> tuple[Array, list[Array]]:
    """Returns the output and the cached layer inputs (post-activation)."""
    cache = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        if i != last:
            cache.append(h)
    return h, cache


def mlp_backward(net: MLP, cache: list[Array], d_out: Array) -> tuple[list[Array], list[Array], Array]:
    """Backprop ``d_out`` (gradient w.r.t. the output) through the MLP.

    Returns ``(dW, db, dx)``.
    """
    dws, dbs = [None] * len(net.weights), [None] * len(net.weights)
    g = d_out
    for i in range(len(net.weights) - 1, -1, -1):
        h_in = cache[i]
        g2 = g if g.ndim == 2 else g[None]
        h2 = h_in if h_in.ndim == 2 else h_in[None]
        dws[i] = h2.T @ g2
        dbs[i] = g2.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g = g * (cache[i] > 0.0)
    return dws, dbs, g


def forward(params: PolicyParameters, obs: Array) -> Array:
    """Deterministic mean action."""
    mean, _ = mlp_forward(params.net, np.asarray(obs, dtype=np.float64))
    return mean


def value(params: ValueParameters, obs: Array) -> Array:
    out, _ = mlp_forward(params.net, np.asarray(obs, dtype=np.float64))
    return out[..., 0]


def gaussian_logprob(mean: Array, log_std: Array, action: Array) -> Array:
    z = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std: Array) -> float:
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def sample_and_logprob(params: PolicyParameters, obs: Array, rng: np.random.Generator
                       ) -> tuple[Array, Array]:
    mean = forward(params, obs)
    noise = rng.standard_normal(mean.shape)
    action = mean + np.exp(params.log_std) * noise
    return action, gaussian_logprob(mean, params.log_std, action)


# ----------------------------------------------------------------------------
# PPO objective
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Weights of the three loss terms.

    ``loss = policy_coef * L_clip + value_coef * L_value - entropy_coef * H``.
    """

    clip_ratio: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 1e-3
    policy_coef: float = 1.0


@dataclass
class Minibatch:
    obs: Array
    actions: Array
    old_logprob: Array
    advantages: Array
    returns: Array


@dataclass
class LossResult:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    policy_grads: list[Array] = field(default_factory=list)
    value_grads: list[Array] = field(default_factory=list)


def ppo_loss(policy: PolicyParameters, value_params: ValueParameters, batch: Minibatch,
             spec: LossSpec, with_grads: bool = True) -> LossResult:
    """Clipped-surrogate PPO loss with exact gradients for every parameter.

    Gradient lists follow ``PolicyParameters.arrays()`` and
    ``ValueParameters.arrays()`` ordering.
    """
    n = batch.obs.shape[0]
    mean, p_cache = mlp_forward(policy.net, batch.obs)
    logp = gaussian_logprob(mean, policy.log_std, batch.actions)
    log_ratio = logp - batch.old_logprob
    ratio = np.exp(log_ratio)
    adv = batch.advantages
    clipped = np.clip(ratio, 1.0 - spec.clip_ratio, 1.0 + spec.clip_ratio)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    use_unclipped = unclipped_obj <= clipped_obj
    policy_loss = -np.mean(np.minimum(unclipped_obj, clipped_obj))

    v, v_cache = mlp_forward(value_params.net, batch.obs)
    v = v[:, 0]
    value_loss = np.mean((v - batch.returns) ** 2)
    entropy = gaussian_entropy(policy.log_std)
    loss = spec.policy_coef * policy_loss + spec.value_coef * value_loss - spec.entropy_coef * entropy

    result = LossResult(
        loss=float(loss),
        policy_loss=float(policy_loss),
        value_loss=float(value_loss),
        entropy=entropy,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > spec.clip_ratio)),
        approx_kl=float(np.mean((ratio - 1.0) - log_ratio)),
    )
    if not with_grads:
        return result

    # d loss / d logp
    g_logp = -spec.policy_coef * np.where(use_unclipped, ratio * adv, 0.0) / n
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = batch.actions - mean
    d_mean = g_logp[:, None] * diff * inv_var
    d_log_std = np.sum(g_logp[:, None] * (diff**2 * inv_var - 1.0), axis=0) - spec.entropy_coef
    dws, dbs, _ = mlp_backward(policy.net, p_cache, d_mean)
    result.policy_grads = [a for pair in zip(dws, dbs) for a in pair] + [d_log_std]

    d_v = (spec.value_coef * 2.0 * (v - batch.returns) / n)[:, None]
    dws, dbs, _ = mlp_backward(value_params.net, v_cache, d_v)
    result.value_grads = [a for pair in zip(dws, dbs) for a in pair]
    return result


# ----------------------------------------------------------------------------
# Observation normalization
# ----------------------------------------------------------------------------

@dataclass
class RunningNormalizer:
    """Running mean/variance (parallel Welford merge); frozen when ``frozen``."""

    mean: Array = field(default_factory=lambda: np.zeros(OBS_DIM))
    var: Array = field(default_factory=lambda: np.ones(OBS_DIM))
    count: float = 1e-4
    clip: float = 10.0
    frozen: bool = False

    def update(self, x: Array) -> None:
        if self.frozen:
            return
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        b_count = x.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x: Array) -> Array:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)

    def copy(self) -> "RunningNormalizer":
        return RunningNormalizer(self.mean.copy(), self.var.copy(), self.count, self.clip, self.frozen)


# ----------------------------------------------------------------------------
# Agent bundle and checkpoints
# ----------------------------------------------------------------------------

@dataclass
class Agent:
    policy: PolicyParameters
    value: ValueParameters
    normalizer: RunningNormalizer

    @classmethod
    def initial(cls, seed: int) -> "Agent":
        rng = np.random.default_rng(seed)
        return cls(init_policy(rng), init_value(rng), RunningNormalizer())

    def mean_action(self, obs: Array) -> Array:
        return forward(self.policy, self.normalizer(obs))

    def act(self, obs: Array, rng: np.random.Generator) -> tuple[Array, Array]:
        return sample_and_logprob(self.policy, self.normalizer(obs), rng)

    def value_of(self, obs: Array) -> Array:
        return value(self.value, self.normalizer(obs))

    def act_normalized(self, norm_obs: Array, rng: np.random.Generator) -> tuple[Array, Array]:
        return sample_and_logprob(self.policy, norm_obs, rng)

    def value_of_normalized(self, norm_obs: Array) -> Array:
        return value(self.value, norm_obs)

    def copy(self) -> "Agent":
        return Agent(self.policy.copy(), self.value.copy(), self.normalizer.copy())


def save_checkpoint(path, agent: Agent, metadata: dict | None = None) -> None:
    """Write an uncompressed ``.npz`` (exact float64 round trip)."""
    arrays = {"format_version": np.array(CHECKPOINT_VERSION)}
    for i, (w, b) in enumerate(zip(agent.policy.net.weights, agent.policy.net.biases)):
        arrays[f"policy_w{i}"], arrays[f"policy_b{i}"] = w, b
    arrays["policy_log_std"] = agent.policy.log_std
    for i, (w, b) in enumerate(zip(agent.value.net.weights, agent.value.net.biases)):
        arrays[f"value_w{i}"], arrays[f"value_b{i}"] = w, b
    arrays["norm_mean"] = agent.normalizer.mean
    arrays["norm_var"] = agent.normalizer.var
    arrays["norm_count"] = np.array(agent.normalizer.count)
    arrays["norm_clip"] = np.array(agent.normalizer.clip)
    arrays["metadata"] = np.array(json.dumps(metadata or {}, sort_keys=True))
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Agent, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")

        def layers(prefix):
            count = sum(1 for k in data.files if k.startswith(f"{prefix}_w"))
            return MLP([data[f"{prefix}_w{i}"].copy() for i in range(count)],
                       [data[f"{prefix}_b{i}"].copy() for i in range(count)])

        policy = PolicyParameters(layers("policy"), data["policy_log_std"].copy())
        value_params = ValueParameters(layers("value"))
        normalizer = RunningNormalizer(data["norm_mean"].copy(), data["norm_var"].copy(),
                                       float(data["norm_count"]), float(data["norm_clip"]), frozen=True)
        metadata = json.loads(str(data["metadata"]))
    expected = [OBS_DIM, *HIDDEN, ACT_DIM]
    if policy.net.sizes != expected:
        raise ValueError(f"policy layer sizes {policy.net.sizes} != {expected}")
    return Agent(policy, value_params, normalizer), metadata
