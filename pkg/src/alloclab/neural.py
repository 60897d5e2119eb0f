"""Dense actor-critic core: forward pass and exact reverse-mode gradients.

Two separate tanh MLPs (default hidden sizes 64, 64): the actor maps a
flattened observation to unbounded action-mean logits, the critic to a
scalar value. The policy is a diagonal Gaussian whose log standard
deviation is a free, state-independent parameter vector.

Everything is float64 and hand-differentiated for this fixed topology; no
general autodiff. Observations flatten row-major (matrix row by row), and
checkpoints record that tag so saved policies stay portable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PolicyParams:
    """All weights/biases of the actor and critic plus the Gaussian log-std."""

    actor_w: list[np.ndarray]
    actor_b: list[np.ndarray]
    critic_w: list[np.ndarray]
    critic_b: list[np.ndarray]
    log_std: np.ndarray

    @property
    def obs_dim(self) -> int:
        return self.actor_w[0].shape[0]

    @property
    def action_dim(self) -> int:
        return self.actor_w[-1].shape[1]

    def tensors(self) -> list[np.ndarray]:
        """Deterministically ordered view of every parameter array."""
        return [*self.actor_w, *self.actor_b, *self.critic_w, *self.critic_b,
                self.log_std]

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            actor_w=[w.copy() for w in self.actor_w],
            actor_b=[b.copy() for b in self.actor_b],
            critic_w=[w.copy() for w in self.critic_w],
            critic_b=[b.copy() for b in self.critic_b],
            log_std=self.log_std.copy(),
        )

    def allclose(self, other: "PolicyParams", rtol=0.0, atol=0.0) -> bool:
        return all(np.allclose(a, b, rtol=rtol, atol=atol)
                   for a, b in zip(self.tensors(), other.tensors()))


@dataclass
class Gradients:
    """Shape-congruent accumulation buffer for PolicyParams."""

    actor_w: list[np.ndarray]
    actor_b: list[np.ndarray]
    critic_w: list[np.ndarray]
    critic_b: list[np.ndarray]
    log_std: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [*self.actor_w, *self.actor_b, *self.critic_w, *self.critic_b,
                self.log_std]

    def add_(self, other: "Gradients") -> None:
        for mine, theirs in zip(self.tensors(), other.tensors()):
            mine += theirs

    def scale_(self, k: float) -> None:
        for arr in self.tensors():
            arr *= k

    def global_norm(self) -> float:
        return math.sqrt(sum(float((g**2).sum()) for g in self.tensors()))

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "Gradients":
        return cls(
            actor_w=[np.zeros_like(w) for w in params.actor_w],
            actor_b=[np.zeros_like(b) for b in params.actor_b],
            critic_w=[np.zeros_like(w) for w in params.critic_w],
            critic_b=[np.zeros_like(b) for b in params.critic_b],
            log_std=np.zeros_like(params.log_std),
        )


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int,
               gain: float) -> np.ndarray:
    """Orthogonal weight matrix (columns or rows orthonormal) scaled by gain."""
    transpose = n_in < n_out
    rows, cols = (n_out, n_in) if transpose else (n_in, n_out)
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # unique decomposition
    return gain * (q.T if transpose else q)


def init_params(
    obs_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (64, 64),
    log_std_init: float = -1.0,
) -> PolicyParams:
    """Orthogonal init: gain sqrt(2) on hidden layers, 0.01 on the actor
    output, 1.0 on the critic output; biases zero; log-std at -1."""
    def stack(out_dim: int, out_gain: float):
        sizes = [obs_dim, *hidden, out_dim]
        gains = [math.sqrt(2.0)] * len(hidden) + [out_gain]
        ws = [orthogonal(rng, sizes[i], sizes[i + 1], gains[i])
              for i in range(len(sizes) - 1)]
        bs = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        return ws, bs

    actor_w, actor_b = stack(action_dim, 0.01)
    critic_w, critic_b = stack(1, 1.0)
    return PolicyParams(actor_w=actor_w, actor_b=actor_b,
                        critic_w=critic_w, critic_b=critic_b,
                        log_std=np.full(action_dim, float(log_std_init)))


def _mlp_forward(ws, bs, x):
    """tanh on every layer except the last (linear output); returns
    (output, activations) with activations[0] = input."""
    acts = [x]
    h = x
    for i in range(len(ws) - 1):
        h = np.tanh(h @ ws[i] + bs[i])
        acts.append(h)
    out = h @ ws[-1] + bs[-1]
    return out, acts


def _mlp_backward(ws, acts, d_out):
    """Exact gradients for _mlp_forward; d_out is dLoss/d(output)."""
    d_ws = [None] * len(ws)
    d_bs = [None] * len(ws)
    grad = d_out
    for i in range(len(ws) - 1, -1, -1):
        d_ws[i] = acts[i].T @ grad
        d_bs[i] = grad.sum(axis=0)
        if i > 0:
            grad = (grad @ ws[i].T) * (1.0 - acts[i] ** 2)
    return d_ws, d_bs


def forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched actor-critic forward: (action means [B, A], values [B]).

    A single flat observation is accepted and returns unbatched outputs.
    """
    mean, value, _ = forward_cached(params, obs)
    return mean, value


def forward_cached(params: PolicyParams, obs: np.ndarray):
    """Forward pass retaining the activations needed by backward()."""
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.obs_dim:
        raise ValueError(f"observation dim {x.shape[1]} != expected {params.obs_dim}")
    mean, actor_acts = _mlp_forward(params.actor_w, params.actor_b, x)
    value, critic_acts = _mlp_forward(params.critic_w, params.critic_b, x)
    value = value[:, 0]
    cache = (actor_acts, critic_acts)
    if single:
        return mean[0], value[0], cache
    return mean, value, cache


def backward(params: PolicyParams, cache, d_mean: np.ndarray,
             d_value: np.ndarray, d_log_std: np.ndarray | None = None) -> Gradients:
    """Exact reverse-mode gradients of a scalar loss given the upstream
    gradients w.r.t. the actor means and critic values of a cached forward."""
    actor_acts, critic_acts = cache
    d_mean = np.atleast_2d(np.asarray(d_mean, dtype=np.float64))
    d_value = np.asarray(d_value, dtype=np.float64).reshape(-1, 1)
    a_ws, a_bs = _mlp_backward(params.actor_w, actor_acts, d_mean)
    c_ws, c_bs = _mlp_backward(params.critic_w, critic_acts, d_value)
    log_std = (np.zeros_like(params.log_std) if d_log_std is None
               else np.asarray(d_log_std, dtype=np.float64))
    return Gradients(actor_w=a_ws, actor_b=a_bs, critic_w=c_ws, critic_b=c_bs,
                     log_std=log_std)


def sample_action(mean: np.ndarray, log_std: np.ndarray,
                  rng: np.random.Generator,
                  deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw from N(mean, diag(exp(2*log_std))); returns (action, log_prob).

    Deterministic mode returns the mean with its own log-probability.
    Batched means give batched actions/log-probs.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if deterministic:
        action = mean.copy()
    else:
        action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return action, gaussian_log_prob(mean, log_std, action)


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray,
                      action: np.ndarray) -> np.ndarray:
    """Sum over dimensions of the diagonal-Gaussian log density."""
    z = (action - mean) * np.exp(-log_std)
    per_dim = -0.5 * z**2 - log_std - 0.5 * LOG_2PI
    return per_dim.sum(axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    """Entropy of the diagonal Gaussian (independent of the mean)."""
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


CHECKPOINT_VERSION = 1


def save_checkpoint(params: PolicyParams, path: str | Path,
                    extra_meta: dict | None = None) -> None:
    """Single-file checkpoint: every tensor plus a JSON meta record carrying
    the format version and the observation flattening-order tag."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "flatten_order": "row-major",
        "obs_dim": params.obs_dim,
        "action_dim": params.action_dim,
        "n_actor_layers": len(params.actor_w),
        "n_critic_layers": len(params.critic_w),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {"meta_json": np.array(json.dumps(meta, sort_keys=True))}
    for i, w in enumerate(params.actor_w):
        arrays[f"actor_w_{i}"] = w
    for i, b in enumerate(params.actor_b):
        arrays[f"actor_b_{i}"] = b
    for i, w in enumerate(params.critic_w):
        arrays[f"critic_w_{i}"] = w
    for i, b in enumerate(params.critic_b):
        arrays[f"critic_b_{i}"] = b
    arrays["log_std"] = params.log_std
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta_json"]))
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        params = PolicyParams(
            actor_w=[data[f"actor_w_{i}"] for i in range(meta["n_actor_layers"])],
            actor_b=[data[f"actor_b_{i}"] for i in range(meta["n_actor_layers"])],
            critic_w=[data[f"critic_w_{i}"] for i in range(meta["n_critic_layers"])],
            critic_b=[data[f"critic_b_{i}"] for i in range(meta["n_critic_layers"])],
            log_std=data["log_std"],
        )
    return params, meta
