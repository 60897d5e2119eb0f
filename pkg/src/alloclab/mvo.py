"""Classical allocation pipeline: shrunk moment estimation and QP solves.

Moments come from a rolling window of daily simple returns. The covariance
is shrunk toward the scaled-identity target (mean of the sample-covariance
diagonal times I) with the closed-form optimal intensity, then passed
through an eigenvalue-clipping PSD repair.

Two portfolio programs are solved on the long-only simplex:

  * max_sharpe - the tangency portfolio, via the standard substitution
    min y'Sy s.t. (mu-rf)'y = 1, y >= 0, then w = y / sum(y);
  * min_variance_for_return - min w'Sw s.t. mu'w >= mu*, w >= 0, sum(w) = 1.

Both are solved by an interior-point solver and then *polished*: the active
support is detected and the reduced equality-KKT system is solved exactly
in closed form, driving KKT residuals to machine precision. Days on which
no asset beats the risk-free rate fall back to the minimum-variance
portfolio (flagged) so rolling backtests never halt mid-stream.

All functions are pure; per-day solves are independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date
from pathlib import Path

import cvxpy as cp
import numpy as np

from .market_data import ReturnPanel

TRADING_DAYS_PER_YEAR = 252
_SUPPORT_EPS = 1e-9


class MvoError(ValueError):
    """Estimation or optimization failure in the classical pipeline."""


@dataclass(frozen=True)
class MomentEstimate:
    mu: np.ndarray       # mean daily simple return per asset
    sigma: np.ndarray    # shrunk, PSD-repaired covariance of daily returns
    shrinkage_intensity: float
    window: int

    @property
    def n_assets(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class FrontierPoint:
    weights: np.ndarray
    expected_return: float  # daily
    risk: float             # daily std
    sharpe: float           # annualized
    fallback: bool = False


def sample_covariance(window: np.ndarray) -> np.ndarray:
    """Maximum-likelihood (divisor t) covariance of the window rows.

    The divisor matches the closed-form shrinkage-intensity estimators;
    a constant rescaling would not change either portfolio solve.
    """
    x = np.asarray(window, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    return x.T @ x / x.shape[0]


def shrink_covariance(sample: np.ndarray, intensity: float) -> np.ndarray:
    """Convex combination of the sample covariance and its scaled-identity
    target: (1 - intensity) * S + intensity * mean(diag(S)) * I."""
    if not 0.0 <= intensity <= 1.0:
        raise MvoError(f"shrinkage intensity {intensity} outside [0, 1]")
    n = sample.shape[0]
    m = float(np.trace(sample)) / n
    return (1.0 - intensity) * sample + intensity * m * np.eye(n)


def ledoit_wolf_intensity(window: np.ndarray) -> float:
    """Closed-form optimal shrinkage intensity for the identity target.

    Estimates delta = b^2 / d^2 with b^2 = min(mean squared sampling error
    of S, d^2) and d^2 the squared distance between S and the target, which
    pins the result into [0, 1]. Degenerate windows (target equals sample)
    return 0.
    """
    x = np.asarray(window, dtype=np.float64)
    t, n = x.shape
    if t < 2:
        raise MvoError(f"window has {t} rows; need at least 2")
    xc = x - x.mean(axis=0, keepdims=True)
    s = xc.T @ xc / t
    m = float(np.trace(s)) / n
    d2 = float(((s - m * np.eye(n)) ** 2).sum()) / n
    if d2 < 1e-300:
        return 0.0
    row_sq = (xc**2).sum(axis=1)
    b_bar2 = (float((row_sq**2).sum()) - t * float((s**2).sum())) / (n * t * t)
    b2 = min(max(b_bar2, 0.0), d2)
    return b2 / d2


def psd_repair(m: np.ndarray, sym_tol: float = 1e-9) -> np.ndarray:
    """Clamp negative eigenvalues to zero and rebuild, re-symmetrizing."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MvoError("matrix must be square")
    if np.max(np.abs(a - a.T)) > sym_tol:
        raise MvoError("matrix not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    eigvals, eigvecs = np.linalg.eigh(a)
    rebuilt = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
    return 0.5 * (rebuilt + rebuilt.T)


def estimate_moments(returns_window: np.ndarray, window: int | None = None) -> MomentEstimate:
    """Column means plus shrunk-and-repaired covariance for one window."""
    x = np.asarray(returns_window, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MvoError("returns window must be 2-D with at least 2 rows")
    if np.any(~np.isfinite(x)):
        raise MvoError("returns window contains missing values")
    intensity = ledoit_wolf_intensity(x)
    sigma = psd_repair(shrink_covariance(sample_covariance(x), intensity))
    return MomentEstimate(
        mu=x.mean(axis=0),
        sigma=sigma,
        shrinkage_intensity=intensity,
        window=window if window is not None else x.shape[0],
    )


def _solve_nonneg_quad(sigma: np.ndarray, a: np.ndarray) -> np.ndarray:
    """min y' sigma y  s.t.  a'y = 1, y >= 0, to interior-point accuracy."""
    n = sigma.shape[0]
    y = cp.Variable(n, nonneg=True)
    problem = cp.Problem(cp.Minimize(cp.quad_form(y, cp.psd_wrap(sigma))), [a @ y == 1])
    for solver, kwargs in ((cp.CLARABEL, {"tol_gap_abs": 1e-12, "tol_gap_rel": 1e-12,
                                          "tol_feas": 1e-12}),
                           (cp.SCS, {"eps": 1e-10, "max_iters": 200_000})):
        try:
            problem.solve(solver=solver, **kwargs)
        except cp.error.SolverError:
            continue
        if problem.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and y.value is not None:
            return np.clip(np.asarray(y.value, dtype=np.float64), 0.0, None)
    raise MvoError(f"quadratic solve failed (status {problem.status})")


def _polish_nonneg_quad(sigma: np.ndarray, a: np.ndarray,
                        y0: np.ndarray) -> np.ndarray | None:
    """Exact equality-KKT solve on the active support detected from y0.

    Iterates a primal active-set refinement seeded by the interior-point
    solution: drop support entries that come back negative, add off-support
    entries with negative reduced gradient. Returns None when the reduced
    systems are singular, in which case the unpolished solution stands.
    """
    n = sigma.shape[0]
    scale = max(float(y0.max()), 1.0)
    support = {i for i in range(n) if y0[i] > _SUPPORT_EPS * scale}
    if not support:
        support = {int(np.argmax(y0))}
    for _ in range(2 * n + 2):
        idx = sorted(support)
        k = len(idx)
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = 2.0 * sigma[np.ix_(idx, idx)]
        kkt[:k, k] = -a[idx]
        kkt[k, :k] = a[idx]
        rhs = np.zeros(k + 1)
        rhs[k] = 1.0
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None
        y_s, lam = sol[:k], sol[k]
        if np.any(y_s < -1e-12):
            support.discard(idx[int(np.argmin(y_s))])
            if not support:
                return None
            continue
        y = np.zeros(n)
        y[idx] = np.clip(y_s, 0.0, None)
        reduced = 2.0 * sigma @ y - lam * a
        off = [i for i in range(n) if i not in support]
        if off and min(reduced[i] for i in off) < -1e-10:
            support.add(min(off, key=lambda i: reduced[i]))
            continue
        return y
    return None


def _tangency_y(sigma: np.ndarray, excess: np.ndarray) -> np.ndarray:
    y = _solve_nonneg_quad(sigma, excess)
    polished = _polish_nonneg_quad(sigma, excess, y)
    if polished is not None and polished.sum() > 0:
        return polished
    return y


def min_variance(est: MomentEstimate, fallback: bool = False) -> FrontierPoint:
    """Minimum-variance portfolio on the long-only simplex."""
    ones = np.ones(est.n_assets)
    w = _tangency_y(est.sigma, ones)
    w = w / w.sum()
    return _frontier_point(est, w, rf=0.0, fallback=fallback)


def max_sharpe(est: MomentEstimate, rf: float = 0.0) -> FrontierPoint:
    """Tangency (maximum Sharpe) portfolio on the long-only simplex.

    When no asset has positive excess return the tangency substitution is
    undefined; the minimum-variance portfolio is returned instead with the
    fallback flag set.
    """
    excess = est.mu - rf
    if excess.max() <= 0.0:
        return min_variance(est, fallback=True)
    if est.n_assets == 1:
        return _frontier_point(est, np.ones(1), rf)
    y = _tangency_y(est.sigma, excess)
    total = y.sum()
    if total <= 0.0:
        raise MvoError("tangency solve returned the zero vector")
    return _frontier_point(est, y / total, rf)


def min_variance_for_return(est: MomentEstimate, mu_star: float) -> FrontierPoint:
    """Least-risk portfolio achieving an expected daily return >= mu_star."""
    mu = est.mu
    if mu_star > mu.max() + 1e-12:
        raise MvoError(f"target return {mu_star} infeasible (max mean {mu.max()})")
    n = est.n_assets
    w = cp.Variable(n, nonneg=True)
    constraints = [cp.sum(w) == 1, mu @ w >= mu_star]
    problem = cp.Problem(cp.Minimize(cp.quad_form(w, cp.psd_wrap(est.sigma))), constraints)
    for solver, kwargs in ((cp.CLARABEL, {"tol_gap_abs": 1e-12, "tol_gap_rel": 1e-12,
                                          "tol_feas": 1e-12}),
                           (cp.SCS, {"eps": 1e-10, "max_iters": 200_000})):
        try:
            problem.solve(solver=solver, **kwargs)
        except cp.error.SolverError:
            continue
        if problem.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and w.value is not None:
            break
    else:
        raise MvoError(f"min-variance solve failed (status {problem.status})")
    w0 = np.clip(np.asarray(w.value, dtype=np.float64), 0.0, None)
    w0 = w0 / w0.sum()
    polished = _polish_min_var_target(est.sigma, mu, mu_star, w0)
    if polished is not None:
        w0 = polished
    return _frontier_point(est, w0, rf=0.0)


def _polish_min_var_target(sigma: np.ndarray, mu: np.ndarray, mu_star: float,
                           w0: np.ndarray) -> np.ndarray | None:
    """Exact KKT polish for the target-return problem.

    Tries the return constraint inactive first (pure min-variance on the
    support), then active (both equalities). Accepts a candidate only if
    primal feasibility, dual feasibility, and complementary slackness all
    hold to tight tolerance.
    """
    n = sigma.shape[0]
    support = {i for i in range(n) if w0[i] > _SUPPORT_EPS}
    if not support:
        support = {int(np.argmax(w0))}
    for _ in range(2 * n + 2):
        idx = sorted(support)
        w = _solve_min_var_support(sigma, mu, mu_star, idx, return_active=False)
        if w is None:
            w = _solve_min_var_support(sigma, mu, mu_star, idx, return_active=True)
        if w is None:
            return None
        vec, ok, grow = w
        if ok:
            return vec
        if grow is None:
            return None
        if grow in support:  # drop request comes back as its own index
            support.discard(grow)
            if not support:
                return None
        else:
            support.add(grow)
    return None


def _solve_min_var_support(sigma, mu, mu_star, idx, return_active):
    """One reduced KKT solve; returns (w, verified, index_to_flip) or None."""
    n = sigma.shape[0]
    k = len(idx)
    n_eq = 2 if return_active else 1
    kkt = np.zeros((k + n_eq, k + n_eq))
    kkt[:k, :k] = 2.0 * sigma[np.ix_(idx, idx)]
    kkt[:k, k] = -1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + n_eq)
    rhs[k] = 1.0
    if return_active:
        kkt[:k, k + 1] = -mu[idx]
        kkt[k + 1, :k] = mu[idx]
        rhs[k + 1] = mu_star
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    w_s = sol[:k]
    alpha = sol[k + 1] if return_active else 0.0
    if np.any(w_s < -1e-12):
        return np.zeros(n), False, idx[int(np.argmin(w_s))]
    if return_active and alpha < -1e-12:
        return None  # active assumption wrong; caller already tried inactive
    w = np.zeros(n)
    w[idx] = np.clip(w_s, 0.0, None)
    if float(mu @ w) < mu_star - 1e-10:
        return None  # inactive assumption violates the return constraint
    reduced = 2.0 * sigma @ w - sol[k] - max(alpha, 0.0) * mu
    off = [i for i in range(n) if i not in set(idx)]
    if off:
        worst = min(off, key=lambda i: reduced[i])
        if reduced[worst] < -1e-10:
            return np.zeros(n), False, worst
    return w, True, None


def _frontier_point(est: MomentEstimate, w: np.ndarray, rf: float,
                    fallback: bool = False) -> FrontierPoint:
    exp_ret = float(est.mu @ w)
    variance = float(w @ est.sigma @ w)
    risk = float(np.sqrt(max(variance, 0.0)))
    if risk > 0.0:
        sharpe = (exp_ret - rf) / risk * np.sqrt(TRADING_DAYS_PER_YEAR)
    else:
        sharpe = float("inf") if exp_ret > rf else 0.0
    return FrontierPoint(weights=w, expected_return=exp_ret, risk=risk,
                         sharpe=float(sharpe), fallback=fallback)


@dataclass(frozen=True)
class WeightSeries:
    """Per-day target weights (risky assets only) with fallback flags."""

    dates: tuple[date, ...]
    weights: np.ndarray  # (n_days, n_assets)
    fallback: np.ndarray  # bool


def mvo_backtest_weights(panel: ReturnPanel, window: int = 60,
                         rf: float = 0.0) -> WeightSeries:
    """Re-solve max-Sharpe each day on the trailing return window.

    The weights emitted for panel row t are estimated on rows
    [t-window, t), i.e. returns through the previous day only, matching the
    information available to a strategy that trades at day t's close.
    """
    n_rows = panel.simple_returns.shape[0]
    if n_rows <= window:
        raise MvoError(f"panel has {n_rows} rows; need more than window={window}")
    days = range(window, n_rows)
    weights = np.zeros((len(days), panel.n_assets))
    flags = np.zeros(len(days), dtype=bool)
    out_dates = []
    for j, t in enumerate(days):
        est = estimate_moments(panel.simple_returns[t - window:t], window=window)
        point = max_sharpe(est, rf=rf)
        weights[j] = point.weights
        flags[j] = point.fallback
        out_dates.append(panel.dates[t])
    return WeightSeries(dates=tuple(out_dates), weights=weights, fallback=flags)


def write_weights_csv(series: WeightSeries, path: str | Path,
                      asset_names: tuple[str, ...] | None = None) -> None:
    """CSV out: date, one column per asset weight, fallback flag."""
    names = asset_names or tuple(f"w_{i + 1}" for i in range(series.weights.shape[1]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("date," + ",".join(names) + ",fallback_flag\r\n")
        for d, row, flag in zip(series.dates, series.weights, series.fallback):
            cells = ",".join(repr(float(v)) for v in row)
            fh.write(f"{d.isoformat()},{cells},{int(flag)}\r\n")
