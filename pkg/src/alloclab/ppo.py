"""Clipped-surrogate policy-gradient training on vectorized replay envs.

One update cycle collects n_steps transitions from each of n_envs
market-replay environments (episodes auto-reset; time-limit truncations
bootstrap the terminal value from the critic), computes GAE advantages
backward, then runs n_epochs of shuffled minibatch updates on

    L = -E[min(rho * A, clip(rho, 1-eps, 1+eps) * A)]
        + value_coef * E[(V - G)^2] - entropy_coef * H

with an Adam step under a linearly annealed learning rate and a global
gradient-norm cap. Advantages are normalized once per update, not per
minibatch. Rollout collection can fan out (one env per worker); the update
step is a single writer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import neural
from .neural import Gradients, PolicyParams
from .replay_env import ReplayEnv


@dataclass(frozen=True)
class PpoConfig:
    n_envs: int = 4
    n_steps: int = 756
    batch_size: int = 504
    n_epochs: int = 16
    gamma: float = 0.9
    gae_lambda: float = 0.9
    clip_range: float = 0.25
    lr_start: float = 3e-4
    lr_end: float = 1e-5
    total_timesteps: int = 200_000
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    seed: int = 0
    eval_every: int = 10          # validation period, in updates
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = -1.0
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_range <= 0.0:
            raise ValueError("clip_range must be positive")
        if self.buffer_size % self.batch_size != 0:
            raise ValueError(
                f"batch_size {self.batch_size} must divide buffer size "
                f"{self.buffer_size} (= n_steps x n_envs)"
            )

    @property
    def buffer_size(self) -> int:
        return self.n_steps * self.n_envs

    def learning_rate(self, progress: float) -> float:
        """Linear anneal: lr(0) = lr_start, lr(1) = lr_end."""
        return self.lr_start + (self.lr_end - self.lr_start) * progress


# Hyperparameters of the full-scale experiment; 7560 / 1260 = 6 minibatches.
PAPER_CONFIG = PpoConfig(n_envs=10, n_steps=756, batch_size=1260, n_epochs=16,
                         total_timesteps=7_500_000)
# Down-scaled profile preserving the buffer/batch ratio of 6.
DESK_CONFIG = PpoConfig(n_envs=4, n_steps=756, batch_size=504, n_epochs=16,
                        total_timesteps=200_000)


class VecReplayEnv:
    """In-process vector of independent replay environments with auto-reset."""

    def __init__(self, envs: Sequence[ReplayEnv]):
        if not envs:
            raise ValueError("need at least one environment")
        self.envs = list(envs)
        self.obs_dim = int(np.prod(envs[0].obs_shape))
        self.action_dim = envs[0].action_dim

    def __len__(self) -> int:
        return len(self.envs)

    def reset_all(self) -> np.ndarray:
        return np.stack([env.reset().flatten() for env in self.envs])

    def step(self, logits: np.ndarray):
        """Returns (obs, rewards, dones, terminal_obs); a finished env is
        reset immediately and its fresh observation is what comes back, with
        the true terminal observation reported separately for bootstrapping."""
        obs = np.empty((len(self.envs), self.obs_dim))
        rewards = np.empty(len(self.envs))
        dones = np.zeros(len(self.envs), dtype=bool)
        terminal_obs: list[np.ndarray | None] = [None] * len(self.envs)
        for i, env in enumerate(self.envs):
            result = env.step(logits[i])
            rewards[i] = result.reward
            if result.done:
                dones[i] = True
                terminal_obs[i] = result.observation.flatten()
                obs[i] = env.reset().flatten()
            else:
                obs[i] = result.observation.flatten()
        return obs, rewards, dones, terminal_obs


@dataclass
class RolloutBuffer:
    """Transition storage for one update: full before use, cleared after."""

    obs: np.ndarray        # (n_steps, n_envs, obs_dim)
    actions: np.ndarray    # (n_steps, n_envs, action_dim)
    log_probs: np.ndarray  # (n_steps, n_envs)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray      # True where the transition ended its episode
    last_values: np.ndarray  # critic value of the observation after the buffer

    @property
    def capacity(self) -> int:
        return self.rewards.shape[0] * self.rewards.shape[1]

    def clear(self) -> None:
        for arr in (self.obs, self.actions, self.log_probs, self.rewards,
                    self.values, self.dones):
            arr.fill(0)


def collect_rollouts(
    params: PolicyParams,
    vec_env: VecReplayEnv,
    n_steps: int,
    rng: np.random.Generator,
    gamma: float,
    last_obs: np.ndarray,
    episode_returns: np.ndarray | None = None,
    finished_episodes: list | None = None,
) -> tuple[RolloutBuffer, np.ndarray]:
    """Advance every env n_steps with sampled actions; returns the filled
    buffer and the observation matrix to resume from.

    Episodes that hit the end of their replay window are truncations, so the
    critic's value of the terminal observation is folded into that step's
    reward (discounted once) before the env auto-resets.
    """
    n_envs = len(vec_env)
    buf = RolloutBuffer(
        obs=np.empty((n_steps, n_envs, vec_env.obs_dim)),
        actions=np.empty((n_steps, n_envs, vec_env.action_dim)),
        log_probs=np.empty((n_steps, n_envs)),
        rewards=np.empty((n_steps, n_envs)),
        values=np.empty((n_steps, n_envs)),
        dones=np.zeros((n_steps, n_envs), dtype=bool),
        last_values=np.empty(n_envs),
    )
    obs = last_obs
    for s in range(n_steps):
        mean, value = neural.forward(params, obs)
        actions, log_probs = neural.sample_action(mean, params.log_std, rng)
        next_obs, rewards, dones, terminal_obs = vec_env.step(actions)
        if episode_returns is not None:
            episode_returns += rewards
            for i in np.flatnonzero(dones):
                if finished_episodes is not None:
                    finished_episodes.append(float(episode_returns[i]))
                episode_returns[i] = 0.0
        for i in np.flatnonzero(dones):
            _, term_value = neural.forward(params, terminal_obs[i])
            rewards[i] += gamma * float(term_value)
        buf.obs[s] = obs
        buf.actions[s] = actions
        buf.log_probs[s] = log_probs
        buf.rewards[s] = rewards
        buf.values[s] = value
        buf.dones[s] = dones
        obs = next_obs
    _, buf.last_values = neural.forward(params, obs)
    return buf, obs


def compute_gae(buffer: RolloutBuffer, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion; returns raw (advantages, returns = A + V)."""
    n_steps = buffer.rewards.shape[0]
    advantages = np.zeros_like(buffer.rewards)
    next_adv = np.zeros(buffer.rewards.shape[1])
    next_values = buffer.last_values
    for s in range(n_steps - 1, -1, -1):
        non_terminal = 1.0 - buffer.dones[s]
        delta = buffer.rewards[s] + gamma * next_values * non_terminal - buffer.values[s]
        next_adv = delta + gamma * lam * non_terminal * next_adv
        advantages[s] = next_adv
        next_values = buffer.values[s]
    return advantages, advantages + buffer.values


def clipped_surrogate(ratio: np.ndarray, advantages: np.ndarray,
                      clip_range: float) -> np.ndarray:
    """Per-sample surrogate objective min(rho*A, clip(rho)*A)."""
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range)
    return np.minimum(ratio * advantages, clipped * advantages)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "AdamState":
        return cls(m=[np.zeros_like(t) for t in params.tensors()],
                   v=[np.zeros_like(t) for t in params.tensors()])


def adam_step(params: PolicyParams, grads: Gradients, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params.tensors(), grads.tensors(), state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def ppo_update(
    params: PolicyParams,
    adam: AdamState,
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PpoConfig,
    lr: float,
    rng: np.random.Generator,
) -> dict:
    """One full update pass (n_epochs of shuffled minibatches), in place."""
    batch = buffer.capacity
    obs = buffer.obs.reshape(batch, -1)
    actions = buffer.actions.reshape(batch, -1)
    old_log_probs = buffer.log_probs.reshape(batch)
    adv = advantages.reshape(batch)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)  # per update, not per minibatch
    rets = returns.reshape(batch)

    policy_losses, value_losses, clip_fracs = [], [], []
    entropy = neural.gaussian_entropy(params.log_std)
    for _ in range(config.n_epochs):
        perm = rng.permutation(batch)
        for start in range(0, batch, config.batch_size):
            mb = perm[start:start + config.batch_size]
            n_mb = mb.shape[0]
            mean, values, cache = neural.forward_cached(params, obs[mb])
            log_probs = neural.gaussian_log_prob(mean, params.log_std, actions[mb])
            ratio = np.exp(log_probs - old_log_probs[mb])
            surr1 = ratio * adv[mb]
            surr2 = np.clip(ratio, 1.0 - config.clip_range,
                            1.0 + config.clip_range) * adv[mb]
            policy_loss = -np.minimum(surr1, surr2).mean()
            value_loss = np.mean((values - rets[mb]) ** 2)
            entropy = neural.gaussian_entropy(params.log_std)
            total = (policy_loss + config.value_coef * value_loss
                     - config.entropy_coef * entropy)
            if not np.isfinite(total):
                raise RuntimeError(
                    "non-finite loss: "
                    f"policy={policy_loss} value={value_loss} entropy={entropy} "
                    f"max_ratio={np.max(ratio)} lr={lr}"
                )

            # gradient flows through the unclipped branch only where it wins the min
            use_unclipped = surr1 <= surr2
            d_log_prob = np.where(use_unclipped, ratio * adv[mb], 0.0) / (-n_mb)
            inv_var = np.exp(-2.0 * params.log_std)
            diff = actions[mb] - mean
            d_mean = d_log_prob[:, None] * diff * inv_var
            z2 = diff**2 * inv_var
            d_log_std = (d_log_prob[:, None] * (z2 - 1.0)).sum(axis=0)
            d_log_std -= config.entropy_coef  # dH/dlog_std = 1 per dim
            d_value = config.value_coef * 2.0 * (values - rets[mb]) / n_mb
            grads = neural.backward(params, cache, d_mean, d_value, d_log_std)

            norm = grads.global_norm()
            if norm > config.max_grad_norm:
                grads.scale_(config.max_grad_norm / norm)
            adam_step(params, grads, adam, lr, eps=config.adam_eps)

            policy_losses.append(float(policy_loss))
            value_losses.append(float(value_loss))
            clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > config.clip_range)))

    return {
        "policy_loss": float(np.mean(policy_losses)),
        "value_loss": float(np.mean(value_losses)),
        "entropy": float(entropy),
        "clip_fraction": float(np.mean(clip_fracs)),
        "lr": lr,
    }


def evaluate_policy(params: PolicyParams, env: ReplayEnv) -> float:
    """Total reward of one deterministic (mean-action) episode. Pure: no
    RNG is consumed and parameters are untouched."""
    obs = env.reset().flatten()
    total = 0.0
    while True:
        mean, _ = neural.forward(params, obs)
        result = env.step(mean)
        total += result.reward
        if result.done:
            return total
        obs = result.observation.flatten()


@dataclass
class TrainResult:
    best_params: PolicyParams
    best_score: float
    best_update: int
    final_params: PolicyParams
    curve: list = field(default_factory=list)
    timesteps: int = 0


def train(
    config: PpoConfig,
    train_envs: Sequence[ReplayEnv],
    val_env: ReplayEnv,
    init: PolicyParams | None = None,
    log_csv: str | Path | None = None,
    stop_callback: Callable[[int, PolicyParams], bool] | None = None,
) -> TrainResult:
    """Full training loop with periodic deterministic validation.

    The checkpoint with the highest validation episode reward wins (ties go
    to the earlier update). stop_callback, when given, is polled after every
    update and may end training early (used by convergence probes).
    """
    vec_env = VecReplayEnv(train_envs)
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else neural.init_params(
        vec_env.obs_dim, vec_env.action_dim, rng,
        hidden=config.hidden, log_std_init=config.log_std_init,
    )
    if params.obs_dim != vec_env.obs_dim or params.action_dim != vec_env.action_dim:
        raise ValueError("policy shape does not match the environment")
    adam = AdamState.zeros_like(params)
    n_updates = max(1, math.ceil(config.total_timesteps / config.buffer_size))

    obs = vec_env.reset_all()
    episode_returns = np.zeros(len(vec_env))
    best_score, best_params, best_update = -np.inf, params.copy(), 0
    curve: list[dict] = []
    timesteps = 0
    for update in range(1, n_updates + 1):
        lr = config.learning_rate(timesteps / config.total_timesteps)
        finished: list[float] = []
        buffer, obs = collect_rollouts(
            params, vec_env, config.n_steps, rng, config.gamma, obs,
            episode_returns=episode_returns, finished_episodes=finished,
        )
        timesteps += buffer.capacity
        advantages, returns = compute_gae(buffer, config.gamma, config.gae_lambda)
        stats = ppo_update(params, adam, buffer, advantages, returns, config, lr, rng)
        buffer.clear()

        record = {
            "update": update,
            "timestep": timesteps,
            "mean_episode_reward": float(np.mean(finished)) if finished else math.nan,
            **stats,
            "validation_reward": math.nan,
        }
        if update % config.eval_every == 0 or update == n_updates:
            score = evaluate_policy(params, val_env)
            record["validation_reward"] = score
            if score > best_score:
                best_score, best_params, best_update = score, params.copy(), update
        curve.append(record)
        if stop_callback is not None and stop_callback(update, params):
            if math.isnan(record["validation_reward"]):
                score = evaluate_policy(params, val_env)
                record["validation_reward"] = score
                if score > best_score:
                    best_score, best_params, best_update = score, params.copy(), update
            break

    if log_csv is not None:
        _write_curve_csv(curve, log_csv)
    return TrainResult(best_params=best_params, best_score=best_score,
                       best_update=best_update, final_params=params,
                       curve=curve, timesteps=timesteps)


def _write_curve_csv(curve: list[dict], path: str | Path) -> None:
    fields = ["update", "timestep", "mean_episode_reward", "policy_loss",
              "value_loss", "entropy", "clip_fraction", "lr", "validation_reward"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: row.get(k) for k in fields})
