"""Market-replay environment: day-by-day rebalancing over a price window.

The environment is the book of record. Cash and valuations are integer
cents and share counts are integers, so rebalancing conserves portfolio
value *exactly* (no costs, no slippage) and the conservation invariant is
testable to the cent. Each step:

  1. value the book at today's prices,
  2. rebalance to the target weights (whole shares, floor; residual to cash),
  3. advance one day and revalue,
  4. feed the simple portfolio return into the differential-Sharpe
     accumulator to produce the reward,
  5. emit the next observation with the realized (post-floor) weights.

Observations are (n+1) x T matrices: column 0 holds the realized weight
vector [w_1..w_n, w_cash] measured at rebalance prices; asset rows carry T-1
log returns newest-first; the cash row carries the three standardized
market-regime features in columns 1..3 and zeros elsewhere.

Instances own their state and are single-threaded; run one per worker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import IO

import numpy as np

from .diff_sharpe import DsrState, DEFAULT_ETA, update as dsr_update
from .market_data import FeaturePanel, PriceTable

DEFAULT_LOOKBACK = 60
DEFAULT_INITIAL_CASH = 100_000.0


class EnvError(RuntimeError):
    """Environment misuse or invalid configuration."""


@dataclass(frozen=True)
class Portfolio:
    """Whole-share positions plus integer-cent cash."""

    shares: np.ndarray  # int64, one entry per risky asset
    cash_cents: int

    def value_cents(self, price_cents: np.ndarray) -> int:
        return int(self.shares @ price_cents) + self.cash_cents

    @property
    def cash(self) -> float:
        return self.cash_cents / 100.0


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class MarketSlice:
    """A physically-copied contiguous window of market data.

    Training/validation code is handed slices that simply do not contain
    any later data, which is what makes the no-leakage guarantee structural
    rather than a convention.
    """

    dates: tuple[date, ...]
    prices: np.ndarray        # float dollars, (n_days, n)
    price_cents: np.ndarray   # int64
    log_returns: np.ndarray   # row k = log return of dates[k]; row 0 NaN if unknown
    features: np.ndarray      # (n_days, 3) standardized vol20, vol ratio, vix; NaN ok
    asset_names: tuple[str, ...]

    @classmethod
    def build(cls, pt: PriceTable, fp: FeaturePanel, start: int, stop: int) -> "MarketSlice":
        """Slice PriceTable rows [start, stop); log returns for row `start`
        use the prior table row when one exists (past data only)."""
        if not (0 <= start < stop <= pt.n_days):
            raise EnvError(f"bad slice bounds [{start}, {stop}) for {pt.n_days} rows")
        prices = pt.prices[start:stop].copy()
        cents = np.rint(prices * 100.0).astype(np.int64)
        if np.any(cents < 1):
            raise EnvError("price below one cent after quantization")
        n_days = stop - start
        lr = np.full((n_days, pt.n_assets), np.nan)
        lo = max(start, 1)
        lr[lo - start:] = np.log(pt.prices[lo:stop] / pt.prices[lo - 1:stop - 1])
        feats = fp.feature_matrix()[start:stop].copy()
        return cls(
            dates=pt.dates[start:stop],
            prices=prices,
            price_cents=cents,
            log_returns=lr,
            features=feats,
            asset_names=pt.asset_names,
        )

    @property
    def n_assets(self) -> int:
        return self.prices.shape[1]

    @property
    def n_days(self) -> int:
        return len(self.dates)


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    """Map unbounded logits onto the long-only simplex (max-shifted softmax)."""
    a = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise EnvError(f"non-finite action logits: {a!r}")
    e = np.exp(a - a.max())
    return e / e.sum()


def rebalance(p: Portfolio, target_w: np.ndarray, price_cents: np.ndarray) -> Portfolio:
    """Re-allocate to target weights at the given prices, flooring to whole
    shares; the flooring residual stays in cash. Value is conserved exactly."""
    n = price_cents.shape[0]
    w = np.asarray(target_w, dtype=np.float64)
    if w.shape[0] not in (n, n + 1):
        raise EnvError(f"target weight length {w.shape[0]} for {n} assets")
    if np.any(w < -1e-9):
        raise EnvError("negative target weight")
    total = w.sum()
    if total > 1.0 + 1e-6:
        raise EnvError(f"target weights sum to {total} > 1")
    if w.shape[0] == n + 1 and abs(total - 1.0) > 1e-6:
        raise EnvError(f"target weights sum to {total}, not 1")
    value = p.value_cents(price_cents)
    shares = np.floor(np.clip(w[:n], 0.0, 1.0) * value / price_cents).astype(np.int64)
    spent = int(shares @ price_cents)
    while spent > value:  # float-slop guard; practically unreachable
        i = int(np.argmax(shares * price_cents))
        shares[i] -= 1
        spent -= int(price_cents[i])
    return Portfolio(shares=shares, cash_cents=value - spent)


def realized_weights(p: Portfolio, price_cents: np.ndarray) -> np.ndarray:
    """[w_1..w_n, w_cash] at the given prices; sums to 1 by construction."""
    value = p.value_cents(price_cents)
    w = np.empty(price_cents.shape[0] + 1)
    w[:-1] = p.shares * price_cents / value
    w[-1] = p.cash_cents / value
    return w


class ReplayEnv:
    """Replays one MarketSlice as an episode; deterministic given actions."""

    def __init__(
        self,
        market: MarketSlice,
        initial_cash: float = DEFAULT_INITIAL_CASH,
        lookback: int = DEFAULT_LOOKBACK,
        eta: float = DEFAULT_ETA,
        episode_log: str | Path | IO | None = None,
    ):
        if market.n_days < lookback + 2:
            raise EnvError(
                f"slice has {market.n_days} days; need >= lookback+2 = {lookback + 2}"
            )
        if initial_cash < 0.01:
            raise EnvError("initial cash must be at least one cent")
        self.market = market
        self.lookback = lookback
        self.eta = eta
        self.initial_cash_cents = int(round(initial_cash * 100))
        self.n_assets = market.n_assets
        self.action_dim = self.n_assets + 1
        self.obs_shape = (self.n_assets + 1, lookback)
        self._log: IO | None = None
        if episode_log is not None:
            self._log = (open(episode_log, "w", encoding="utf-8")
                         if isinstance(episode_log, (str, Path)) else episode_log)
        self._t = -1
        self._done = True

    @property
    def episode_length(self) -> int:
        return self.market.n_days - 1 - self.lookback

    @property
    def current_date(self) -> date:
        if self._t < 0:
            raise EnvError("environment not reset")
        return self.market.dates[self._t]

    def reset(self) -> np.ndarray:
        self._t = self.lookback
        self.portfolio = Portfolio(
            shares=np.zeros(self.n_assets, dtype=np.int64),
            cash_cents=self.initial_cash_cents,
        )
        self._weights = np.zeros(self.action_dim)
        self._weights[-1] = 1.0
        self._dsr = DsrState(eta=self.eta)
        self._done = False
        return self._observation()

    def step(self, logits: np.ndarray) -> StepResult:
        return self.step_weights(softmax_weights(logits))

    def step_weights(self, target_w: np.ndarray) -> StepResult:
        """Shared mechanics for every strategy type (agent or classical)."""
        if self._done:
            raise EnvError("step called on a finished episode; call reset()")
        t = self._t
        cents_now = self.market.price_cents[t]
        value_now = self.portfolio.value_cents(cents_now)
        self.portfolio = rebalance(self.portfolio, target_w, cents_now)
        realized = realized_weights(self.portfolio, cents_now)
        dpw = float(np.abs(realized[:-1] - self._weights[:-1]).sum())
        self._weights = realized

        self._t = t + 1
        value_next = self.portfolio.value_cents(self.market.price_cents[self._t])
        port_return = value_next / value_now - 1.0
        self._dsr, reward = dsr_update(self._dsr, port_return)
        self._done = self._t >= self.market.n_days - 1
        obs = self._observation()
        info = {
            "date": self.market.dates[self._t],
            "value": value_next / 100.0,
            "weights": realized,
            "target_weights": np.asarray(target_w, dtype=np.float64).copy(),
            "dpw": dpw,
            "portfolio_return": port_return,
        }
        if self._log is not None:
            self._log.write(json.dumps({
                "date": info["date"].isoformat(),
                "target_weights": list(map(float, info["target_weights"])),
                "realized_weights": list(map(float, realized)),
                "value": info["value"],
                "reward": reward,
            }) + "\n")
            if self._done:
                self._log.flush()
        return StepResult(observation=obs, reward=reward, done=self._done, info=info)

    def _observation(self) -> np.ndarray:
        t, T = self._t, self.lookback
        obs = np.zeros(self.obs_shape)
        obs[:, 0] = self._weights
        window = self.market.log_returns[t - T + 1:t]  # chronological, (T-1, n)
        obs[:self.n_assets, 1:] = window[::-1].T       # newest first
        feats = self.market.features[t]
        obs[self.n_assets, 1:4] = np.where(np.isfinite(feats), feats, 0.0)
        return obs
