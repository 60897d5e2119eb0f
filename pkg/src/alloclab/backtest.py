"""Backtest harness and performance metrics.

Any weight-producing strategy (a trained policy, the rolling mean-variance
solver, or a fixed schedule) runs through the *same* replay-environment
mechanics: whole-share rebalancing, integer-cent accounting, zero costs.
The report carries daily values, realized weights, the per-day turnover
Delta_pw (sum of absolute risky-weight changes, in [0, 2]), and a 13-metric
summary.

Annualization uses 252 trading days. Daily value-at-risk is the empirical
5th percentile of daily returns (linear interpolation). Stability is the
R-squared of an OLS fit to cumulative log returns over time. Kurtosis is
reported as *excess* kurtosis, bias-adjusted, and skew is the bias-adjusted
sample skewness. Degenerate cases (zero vol, no losing days, ...) surface
in the report's flags instead of crashing the run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import neural
from .mvo import WeightSeries
from .neural import PolicyParams
from .replay_env import (DEFAULT_INITIAL_CASH, DEFAULT_LOOKBACK, MarketSlice,
                         ReplayEnv, softmax_weights)

TRADING_DAYS_PER_YEAR = 252

METRIC_KEYS = (
    "annual_return", "cumulative_return", "annual_volatility", "sharpe_ratio",
    "calmar_ratio", "stability", "max_drawdown", "omega_ratio", "sortino_ratio",
    "skew", "kurtosis", "tail_ratio", "daily_var_95",
)


class BacktestError(RuntimeError):
    pass


@dataclass
class BacktestReport:
    strategy: str
    span: tuple[date, date]
    dates: tuple[date, ...]      # one per recorded day; dates[0] is the start
    values: np.ndarray           # portfolio value in dollars, length L+1
    returns: np.ndarray          # length L; returns[k] = values[k+1]/values[k] - 1
    weights: np.ndarray          # (L+1, n+1) realized weights incl. cash
    dpw: np.ndarray              # (L+1,), 0.0 on the first row
    metrics: dict
    window_id: int | None = None
    seed: int | None = None


class DrlStrategy:
    """Deterministic-mode policy: softmax of the actor's mean logits."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def __call__(self, obs: np.ndarray, day: date) -> np.ndarray:
        mean, _ = neural.forward(self.params, obs.flatten())
        return softmax_weights(mean)


class MvoStrategy:
    """Looks up precomputed per-day solver weights (risky assets only)."""

    def __init__(self, series: WeightSeries):
        self.by_date = {d: w for d, w in zip(series.dates, series.weights)}

    def __call__(self, obs: np.ndarray, day: date) -> np.ndarray:
        if day not in self.by_date:
            raise KeyError(f"no solver weights for {day}")
        w = self.by_date[day]
        return np.concatenate([w, [max(0.0, 1.0 - w.sum())]])


class FixedWeightStrategy:
    """Constant target weights (n+1, cash last) on every day."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, obs: np.ndarray, day: date) -> np.ndarray:
        return self.weights


def run_backtest(
    strategy: Callable[[np.ndarray, date], np.ndarray],
    market: MarketSlice,
    strategy_tag: str,
    initial_cash: float = DEFAULT_INITIAL_CASH,
    lookback: int = DEFAULT_LOOKBACK,
    window_id: int | None = None,
    seed: int | None = None,
) -> BacktestReport:
    """Run one strategy over one slice with the shared env mechanics.

    Row 0 of the daily record is the all-cash starting book; row k >= 1
    holds the value at that date, the weights put on at the previous close,
    and the turnover incurred by that rebalance.
    """
    env = ReplayEnv(market, initial_cash=initial_cash, lookback=lookback)
    obs = env.reset()
    dates = [env.current_date]
    values = [initial_cash]
    weights = [obs[:, 0].copy()]
    dpw = [0.0]
    while True:
        day = env.current_date
        try:
            target = strategy(obs, day)
        except Exception as exc:
            raise BacktestError(
                f"strategy '{strategy_tag}' failed on {day.isoformat()}: {exc}"
            ) from exc
        result = env.step_weights(target)
        dates.append(result.info["date"])
        values.append(result.info["value"])
        weights.append(result.info["weights"])
        dpw.append(result.info["dpw"])
        obs = result.observation
        if result.done:
            break
    values_arr = np.asarray(values)
    returns = values_arr[1:] / values_arr[:-1] - 1.0
    return BacktestReport(
        strategy=strategy_tag,
        span=(dates[0], dates[-1]),
        dates=tuple(dates),
        values=values_arr,
        returns=returns,
        weights=np.asarray(weights),
        dpw=np.asarray(dpw),
        metrics=compute_metrics(returns, values_arr),
        window_id=window_id,
        seed=seed,
    )


def turnover(w_prev: np.ndarray, w_new: np.ndarray) -> float:
    """Sum of absolute weight changes across risky assets (cash excluded)."""
    a = np.asarray(w_prev, dtype=np.float64)
    b = np.asarray(w_new, dtype=np.float64)
    return float(np.abs(b[:-1] - a[:-1]).sum())


def max_drawdown(values: np.ndarray) -> float:
    """Largest peak-to-trough decline, as a (non-positive) fraction."""
    v = np.asarray(values, dtype=np.float64)
    running_max = np.maximum.accumulate(v)
    return float(np.min(v / running_max - 1.0))


def compute_metrics(returns: np.ndarray, values: np.ndarray) -> dict:
    """The 13-metric summary; degenerate metrics are NaN/inf plus a flag."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise BacktestError("need at least 2 returns")
    flags: list[str] = []
    n = r.size

    total = float(np.prod(1.0 + r)) - 1.0
    annual_return = (1.0 + total) ** (TRADING_DAYS_PER_YEAR / n) - 1.0
    sd = float(np.std(r, ddof=1))
    annual_vol = sd * math.sqrt(TRADING_DAYS_PER_YEAR)
    if sd > 0.0:
        sharpe = float(np.mean(r)) / sd * math.sqrt(TRADING_DAYS_PER_YEAR)
    else:
        sharpe = math.nan
        flags.append("sharpe_undefined_zero_std")

    mdd = max_drawdown(values)
    if mdd < 0.0:
        calmar = annual_return / abs(mdd)
    else:
        calmar = math.nan
        flags.append("calmar_undefined_zero_drawdown")

    cum_log = np.cumsum(np.log1p(r))
    if np.ptp(cum_log) > 0.0:
        corr = np.corrcoef(np.arange(n), cum_log)[0, 1]
        stability = float(corr**2)
    else:
        stability = math.nan
        flags.append("stability_undefined_flat_curve")

    gains = float(r[r > 0].sum())
    losses = float(-r[r < 0].sum())
    if losses > 0.0:
        omega = gains / losses
    else:
        omega = math.inf
        flags.append("omega_infinite_no_losses")

    downside = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    if downside > 0.0:
        sortino = float(np.mean(r)) / downside * math.sqrt(TRADING_DAYS_PER_YEAR)
    else:
        sortino = math.nan
        flags.append("sortino_undefined_no_downside")

    p95 = float(np.percentile(r, 95))
    p5 = float(np.percentile(r, 5))
    if p5 != 0.0:
        tail_ratio = abs(p95) / abs(p5)
    else:
        tail_ratio = math.inf
        flags.append("tail_ratio_infinite_zero_p5")

    return {
        "annual_return": annual_return,
        "cumulative_return": total,
        "annual_volatility": annual_vol,
        "sharpe_ratio": sharpe,
        "calmar_ratio": calmar,
        "stability": stability,
        "max_drawdown": mdd,
        "omega_ratio": omega,
        "sortino_ratio": sortino,
        "skew": float(stats.skew(r, bias=False)),
        "kurtosis": float(stats.kurtosis(r, fisher=True, bias=False)),
        "tail_ratio": tail_ratio,
        "daily_var_95": p5,
        "flags": sorted(flags),
    }


@dataclass
class Comparison:
    """Per-strategy metric summary: seed-mean per period, then mean across
    periods, except max drawdown which is the worst seen in any period."""

    strategies: dict = field(default_factory=dict)  # tag -> {metric: value}
    n_reports: dict = field(default_factory=dict)


def compare(reports: Sequence[BacktestReport]) -> Comparison:
    if len(reports) < 2:
        raise BacktestError("need at least 2 reports to compare")
    out = Comparison()
    tags = sorted({rep.strategy for rep in reports})
    for tag in tags:
        tagged = [rep for rep in reports if rep.strategy == tag]
        by_window: dict = {}
        for rep in tagged:
            by_window.setdefault(rep.window_id, []).append(rep)
        period_rows = []
        for _, seeds in sorted(by_window.items(), key=lambda kv: (kv[0] is None, kv[0])):
            stacked = {
                key: np.nanmean([s.metrics[key] for s in seeds]) for key in METRIC_KEYS
            }
            stacked["max_drawdown"] = float(np.min([s.metrics["max_drawdown"]
                                                    for s in seeds]))
            period_rows.append(stacked)
        summary = {key: float(np.nanmean([row[key] for row in period_rows]))
                   for key in METRIC_KEYS}
        summary["max_drawdown"] = float(min(row["max_drawdown"] for row in period_rows))
        out.strategies[tag] = summary
        out.n_reports[tag] = len(tagged)
    return out


def write_report_json(report: BacktestReport, path: str | Path) -> None:
    payload = {
        "strategy": report.strategy,
        "window_id": report.window_id,
        "seed": report.seed,
        "span": [report.span[0].isoformat(), report.span[1].isoformat()],
        "n_days": int(report.values.shape[0]),
        "final_value": float(report.values[-1]),
        "mean_dpw": float(report.dpw[1:].mean()) if report.dpw.size > 1 else 0.0,
        "metrics": report.metrics,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_report_csv(report: BacktestReport, path: str | Path) -> None:
    """Per-day CSV: date, value, realized weights, turnover."""
    n_cols = report.weights.shape[1]
    header = (["date", "value"]
              + [f"w_{i + 1}" for i in range(n_cols - 1)] + ["w_cash", "dpw"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, d in enumerate(report.dates):
            writer.writerow([d.isoformat(), repr(float(report.values[k]))]
                            + [repr(float(x)) for x in report.weights[k]]
                            + [repr(float(report.dpw[k]))])


def write_comparison_csv(comparison: Comparison, path: str | Path) -> None:
    """Metric rows by strategy columns (spreadsheet-friendly, RFC 4180)."""
    tags = sorted(comparison.strategies)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + tags)
        for key in METRIC_KEYS:
            writer.writerow([key] + [repr(float(comparison.strategies[t][key]))
                                     for t in tags])


def write_plot_csv(reports: Sequence[BacktestReport], path: str | Path,
                   tags: tuple[str, str] = ("drl", "mvo")) -> None:
    """Aligned per-day series for external plotting.

    Columns: date, value_<tag>, dd_<tag>, dpw_<tag> for each tag. Multiple
    seeds of the same (strategy, window) are averaged per day; windows are
    concatenated chronologically with drawdowns computed per window.
    """
    per_tag: dict[str, dict] = {}
    for tag in tags:
        rows: dict[date, list] = {}
        by_window: dict = {}
        for rep in reports:
            if rep.strategy == tag:
                by_window.setdefault(rep.window_id, []).append(rep)
        for _, seeds in sorted(by_window.items(), key=lambda kv: (kv[0] is None, kv[0])):
            values = np.mean([s.values for s in seeds], axis=0)
            dpw = np.mean([s.dpw for s in seeds], axis=0)
            dd = values / np.maximum.accumulate(values) - 1.0
            for k, d in enumerate(seeds[0].dates):
                rows[d] = [values[k], dd[k], dpw[k]]
        per_tag[tag] = rows
    all_dates = sorted(set().union(*[set(rows) for rows in per_tag.values()]))
    header = ["date"]
    for tag in tags:
        header += [f"value_{tag}", f"dd_{tag}", f"dpw_{tag}"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for d in all_dates:
            row = [d.isoformat()]
            for tag in tags:
                cells = per_tag[tag].get(d)
                row += ([repr(float(c)) for c in cells] if cells else ["", "", ""])
            writer.writerow(row)
