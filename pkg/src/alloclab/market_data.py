"""Price ingestion, return/feature computation, and synthetic data generation.

Everything here is a pure transformation: tables are validated once on
construction and never mutated, so they are safe to share across workers.
Rolling and expanding statistics are strictly causal (values at date t use
data at dates <= t only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

TRADING_DAYS_PER_YEAR = 252


class DataError(ValueError):
    """Raised for malformed or invariant-violating market data."""


@dataclass(frozen=True)
class PriceTable:
    """Aligned daily adjusted-close prices plus market-index and VIX series.

    prices has one row per date and one column per risky asset. All series
    have identical length, dates are strictly increasing, asset prices and
    the market index are strictly positive, and the VIX column is
    non-negative (a synthetic volatility proxy may start at zero).
    """

    dates: tuple[date, ...]
    prices: np.ndarray
    market_index: np.ndarray
    vix: np.ndarray
    asset_names: tuple[str, ...]

    def __post_init__(self):
        if self.prices.ndim != 2:
            raise DataError("prices must be a 2-D matrix (dates x assets)")
        n_rows = len(self.dates)
        if n_rows < 2:
            raise DataError("need at least 2 rows of price data")
        for name, arr in (("prices", self.prices),
                          ("market_index", self.market_index),
                          ("vix", self.vix)):
            if arr.shape[0] != n_rows:
                raise DataError(f"{name} length {arr.shape[0]} != {n_rows} dates")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        if np.any(self.prices <= 0) or np.any(self.market_index <= 0):
            raise DataError("non-positive price")
        if np.any(self.vix < 0):
            raise DataError("negative vix value")
        if len(self.asset_names) != self.prices.shape[1]:
            raise DataError("asset_names length != number of price columns")
        for a, b in zip(self.dates[:-1], self.dates[1:]):
            if b <= a:
                raise DataError(f"dates not strictly increasing at {b}")

    @property
    def n_assets(self) -> int:
        return self.prices.shape[1]

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def year_bounds(self) -> dict[int, tuple[int, int]]:
        """Map of calendar year -> (first, last) row index present for it."""
        bounds: dict[int, tuple[int, int]] = {}
        for i, d in enumerate(self.dates):
            if d.year not in bounds:
                bounds[d.year] = (i, i)
            else:
                bounds[d.year] = (bounds[d.year][0], i)
        return bounds


@dataclass(frozen=True)
class ReturnPanel:
    """Per-asset daily returns; row k corresponds to PriceTable row k+1."""

    dates: tuple[date, ...]
    log_returns: np.ndarray
    simple_returns: np.ndarray

    @property
    def n_assets(self) -> int:
        return self.log_returns.shape[1]


@dataclass(frozen=True)
class FeaturePanel:
    """Market-regime features aligned to PriceTable rows; NaN where undefined.

    vol20/vol60 are trailing rolling standard deviations of the market-index
    simple returns (window ending at t inclusive, divisor n-1). The
    standardized variants use an expanding window of strictly prior values,
    so nothing at date t leaks into its own scaling.
    """

    dates: tuple[date, ...]
    vol20: np.ndarray
    vol60: np.ndarray
    vol_ratio: np.ndarray
    vix_raw: np.ndarray
    vol20_std: np.ndarray
    vol_ratio_std: np.ndarray
    vix_std: np.ndarray

    def feature_matrix(self) -> np.ndarray:
        """Standardized (vol20, vol20/vol60, vix) as an (n_days, 3) matrix."""
        return np.column_stack([self.vol20_std, self.vol_ratio_std, self.vix_std])


def load_prices(path: str | Path, schema: dict | None = None) -> PriceTable:
    """Load a daily price CSV into a validated PriceTable.

    Expected header: ``date,<asset1>,...,<assetN>,MARKET,VIX``. The schema
    mapping may override the special column names, e.g.
    ``{"date": "Date", "market": "SPX", "vix": "VIX"}``; every remaining
    column is treated as a risky asset.

    Missing values are forward-filled from the prior date. A missing value
    on the first date is an error (backward filling would leak the future
    into the past).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"price file not found: {path}")
    schema = schema or {}
    date_col = schema.get("date", "date")
    market_col = schema.get("market", "MARKET")
    vix_col = schema.get("vix", "VIX")

    df = pd.read_csv(path)
    for col in (date_col, market_col, vix_col):
        if col not in df.columns:
            raise DataError(f"missing required column '{col}' in {path.name}")
    try:
        parsed = pd.to_datetime(df[date_col], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable date in column '{date_col}': {exc}") from exc

    asset_cols = schema.get("assets")
    if asset_cols is None:
        asset_cols = [c for c in df.columns if c not in (date_col, market_col, vix_col)]
    if not asset_cols:
        raise DataError("no asset columns found")

    series_cols = list(asset_cols) + [market_col, vix_col]
    values = df[series_cols].apply(pd.to_numeric, errors="coerce")
    leading_nan = values.iloc[0].isna()
    if leading_nan.any():
        bad = [c for c, v in leading_nan.items() if v]
        raise DataError(f"missing value on first date in column(s): {bad}")
    values = values.ffill()
    if values.isna().any().any():
        raise DataError("unfillable missing values after forward fill")

    prices = values[asset_cols].to_numpy(dtype=np.float64)
    market = values[market_col].to_numpy(dtype=np.float64)
    vix = values[vix_col].to_numpy(dtype=np.float64)
    if np.any(prices <= 0) or np.any(market <= 0):
        rows, _ = np.nonzero(prices <= 0)
        ctx = f" (first bad row {int(rows[0]) + 2} of {path.name})" if rows.size else ""
        raise DataError("non-positive price" + ctx)
    dates = tuple(d.date() for d in parsed)
    return PriceTable(dates=dates, prices=prices, market_index=market, vix=vix,
                      asset_names=tuple(str(c) for c in asset_cols))


def compute_returns(pt: PriceTable) -> ReturnPanel:
    """Daily log and simple returns; the first price date is dropped."""
    ratio = pt.prices[1:] / pt.prices[:-1]
    return ReturnPanel(
        dates=pt.dates[1:],
        log_returns=np.log(ratio),
        simple_returns=ratio - 1.0,
    )


def slice_panel(panel: ReturnPanel, start: int, stop: int) -> ReturnPanel:
    """Row-slice a ReturnPanel (physical copy, same row/date alignment)."""
    return ReturnPanel(
        dates=panel.dates[start:stop],
        log_returns=panel.log_returns[start:stop].copy(),
        simple_returns=panel.simple_returns[start:stop].copy(),
    )


def rolling_std(series: np.ndarray, window: int) -> np.ndarray:
    """Trailing rolling std (window ending at t inclusive, divisor n-1).

    Entries with fewer than `window` observations available are NaN.
    """
    x = np.asarray(series, dtype=np.float64)
    out = np.full(x.shape[0], np.nan)
    for t in range(window - 1, x.shape[0]):
        out[t] = np.std(x[t - window + 1:t + 1], ddof=1)
    return out


def standardize_expanding(series: np.ndarray, burn_in: int) -> np.ndarray:
    """Standardize each value by the mean/std of all strictly prior values.

    output[t] = (x[t] - mean(x[0:t])) / std(x[0:t]) with the unbiased (n-1)
    std divisor. The first `burn_in` entries are NaN (undefined). A zero
    expanding std is degenerate and maps to 0.0, the distribution center.
    Leading NaN inputs shift the effective start of the expanding window.
    """
    if burn_in < 2:
        raise ValueError("burn_in must be >= 2")
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    out = np.full(n, np.nan)
    defined = np.flatnonzero(np.isfinite(x))
    if defined.size == 0:
        return out
    start = int(defined[0])
    for t in range(start + burn_in, n):
        if not np.isfinite(x[t]):
            continue
        prior = x[start:t]
        prior = prior[np.isfinite(prior)]
        if prior.size < burn_in:
            continue
        sd = np.std(prior, ddof=1)
        if sd < 1e-12:
            out[t] = 0.0
        else:
            out[t] = (x[t] - np.mean(prior)) / sd
    return out


def compute_features(pt: PriceTable, burn_in: int = 20) -> FeaturePanel:
    """Market-regime feature panel from the index and VIX series.

    Requires at least 61 days so that vol60 (60 trailing index returns) is
    defined somewhere. A zero vol60 window makes the ratio degenerate; such
    entries stay NaN and are flagged via the panel's NaN convention.
    """
    if pt.n_days < 61:
        raise DataError(f"need at least 61 days of index data, got {pt.n_days}")
    idx_simple = pt.market_index[1:] / pt.market_index[:-1] - 1.0
    # returns_aligned[t] = index return of date t; undefined at t=0
    returns_aligned = np.concatenate([[np.nan], idx_simple])
    vol20 = rolling_std_skipping_leading_nan(returns_aligned, 20)
    vol60 = rolling_std_skipping_leading_nan(returns_aligned, 60)
    with np.errstate(divide="ignore", invalid="ignore"):
        vol_ratio = np.where(vol60 > 0, vol20 / vol60, np.nan)
    return FeaturePanel(
        dates=pt.dates,
        vol20=vol20,
        vol60=vol60,
        vol_ratio=vol_ratio,
        vix_raw=pt.vix.copy(),
        vol20_std=standardize_expanding(vol20, burn_in),
        vol_ratio_std=standardize_expanding(vol_ratio, burn_in),
        vix_std=standardize_expanding(pt.vix, burn_in),
    )


def rolling_std_skipping_leading_nan(series: np.ndarray, window: int) -> np.ndarray:
    """rolling_std over the defined suffix of a series with leading NaNs."""
    x = np.asarray(series, dtype=np.float64)
    out = np.full(x.shape[0], np.nan)
    defined = np.flatnonzero(np.isfinite(x))
    if defined.size == 0:
        return out
    start = int(defined[0])
    out[start:] = rolling_std(x[start:], window)
    return out


def generate_gbm(
    n_assets: int,
    n_days: int,
    drifts: np.ndarray,
    vols: np.ndarray,
    corr: np.ndarray,
    seed: int,
    s0: float = 100.0,
    start_date: date = date(2006, 1, 2),
) -> PriceTable:
    """Correlated geometric Brownian motion paths on a weekday calendar.

    Annualized drifts/vols, daily step 1/252, deterministic for a given
    seed. The market index is the equal-weight basket rebased to 100; the
    VIX column is a proxy: trailing 20-day realized index vol, annualized,
    times 100 (the first entries copy the first computable value so the
    column has no gaps).
    """
    drifts = np.broadcast_to(np.asarray(drifts, dtype=np.float64), (n_assets,))
    vols = np.broadcast_to(np.asarray(vols, dtype=np.float64), (n_assets,))
    corr = np.asarray(corr, dtype=np.float64)
    if np.any(vols < 0):
        raise DataError("vols must be non-negative")
    if corr.shape != (n_assets, n_assets):
        raise DataError("corr must be (n_assets, n_assets)")
    if not np.allclose(corr, corr.T, atol=1e-12) or not np.allclose(np.diag(corr), 1.0):
        raise DataError("corr must be symmetric with unit diagonal")
    eigvals = np.linalg.eigvalsh(corr)
    if eigvals.min() < -1e-10:
        raise DataError(f"corr not PSD (min eigenvalue {eigvals.min():.3e})")

    rng = np.random.default_rng(seed)
    dt = 1.0 / TRADING_DAYS_PER_YEAR
    # PSD square root of corr via eigendecomposition (handles singular corr)
    w, v = np.linalg.eigh(corr)
    root = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    z = rng.standard_normal((n_days - 1, n_assets)) @ root.T
    increments = (drifts - 0.5 * vols**2) * dt + vols * math.sqrt(dt) * z
    log_prices = np.vstack([np.zeros(n_assets), np.cumsum(increments, axis=0)])
    prices = s0 * np.exp(log_prices)

    basket = prices / prices[0]
    market = 100.0 * basket.mean(axis=1)

    idx_returns = market[1:] / market[:-1] - 1.0
    vix = np.empty(n_days)
    first_defined = None
    for t in range(n_days):
        # trailing window of up to 20 index returns ending at date t
        lo = max(0, t - 20)
        window = idx_returns[lo:t]
        if window.size >= 2:
            vix[t] = np.std(window, ddof=1) * math.sqrt(TRADING_DAYS_PER_YEAR) * 100.0
            if first_defined is None:
                first_defined = t
        else:
            vix[t] = np.nan
    if first_defined is None:
        vix[:] = 0.0
    else:
        vix[:first_defined] = vix[first_defined]

    dates = weekday_calendar(start_date, n_days)
    names = tuple(f"A{i + 1}" for i in range(n_assets))
    return PriceTable(dates=dates, prices=prices, market_index=market, vix=vix,
                      asset_names=names)


def weekday_calendar(start: date, n_days: int) -> tuple[date, ...]:
    """n_days consecutive Monday-Friday dates beginning at/after start."""
    out = []
    d = start
    while len(out) < n_days:
        if d.weekday() < 5:
            out.append(d)
        d = d + timedelta(days=1)
    return tuple(out)


def write_prices_csv(pt: PriceTable, path: str | Path) -> None:
    """Write the canonical ``date,<assets>,MARKET,VIX`` CSV."""
    df = pd.DataFrame(pt.prices, columns=list(pt.asset_names))
    df.insert(0, "date", [d.isoformat() for d in pt.dates])
    df["MARKET"] = pt.market_index
    df["VIX"] = pt.vix
    df.to_csv(path, index=False, lineterminator="\r\n")


def write_features_csv(panel: FeaturePanel, path: str | Path) -> None:
    """One row per date; undefined entries written as NA."""
    df = pd.DataFrame({
        "date": [d.isoformat() for d in panel.dates],
        "vol20": panel.vol20,
        "vol60": panel.vol60,
        "vol_ratio": panel.vol_ratio,
        "vix": panel.vix_raw,
        "vol20_std": panel.vol20_std,
        "vol_ratio_std": panel.vol_ratio_std,
        "vix_std": panel.vix_std,
    })
    df.to_csv(path, index=False, na_rep="NA", lineterminator="\r\n")
