"""Online differential Sharpe ratio accumulator.

The per-step reward is the first-order sensitivity of an exponentially
weighted Sharpe ratio to the adaptation rate: with A and B tracking the
first and second moments of simple returns,

    dA = R - A_prev
    dB = R^2 - B_prev
    D  = (B_prev * dA - 0.5 * A_prev * dB) / (B_prev - A_prev^2)^(3/2)

after which the moment estimates advance by A += eta * dA, B += eta * dB.
Both moments start at zero, which makes the first step's denominator zero;
that singularity (and any variance collapse below threshold) yields D = 0,
the neutral reward.

A full-period normalizing factor K_t = sqrt(t / (t - 1)) converts the
population std sqrt(B - A^2) into the unbiased sample std in the *batch*
Sharpe estimator; it plays no role in the per-step recursion above, so it
appears here only inside batch_sharpe (via the ddof=1 std).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DEFAULT_ETA = 1.0 / 252.0
DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class DsrState:
    """Moment-estimate state; value semantics, one instance per episode."""

    A: float = 0.0
    B: float = 0.0
    eta: float = DEFAULT_ETA
    t: int = 0


def update(state: DsrState, r: float) -> tuple[DsrState, float]:
    """Advance the accumulator by one simple return; returns (state, D).

    D is computed from the pre-update moments; the state advances after.
    """
    if not np.isfinite(r):
        raise ValueError(f"non-finite return {r!r}")
    d_a = r - state.A
    d_b = r * r - state.B
    variance = state.B - state.A * state.A
    denom = variance ** 1.5 if variance > 0.0 else 0.0
    if denom < DENOM_FLOOR:
        reward = 0.0
    else:
        reward = (state.B * d_a - 0.5 * state.A * d_b) / denom
    new_state = replace(
        state,
        A=state.A + state.eta * d_a,
        B=state.B + state.eta * d_b,
        t=state.t + 1,
    )
    return new_state, reward


def batch_sharpe(returns: np.ndarray, annualization: float = 252.0) -> float:
    """mean(R) / std(R) * sqrt(annualization), risk-free rate 0.

    std uses the unbiased (n-1) divisor. Raises on fewer than 2 returns or
    a zero standard deviation.
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least 2 returns")
    sd = np.std(r, ddof=1)
    if sd < 1e-300:
        raise ValueError("zero std: Sharpe undefined")
    return float(np.mean(r) / sd * np.sqrt(annualization))
