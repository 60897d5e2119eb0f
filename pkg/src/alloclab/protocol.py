"""Sliding-window experiment orchestration.

Each window spans train_years + val_years + test_years of calendar years on
the trading calendar; consecutive windows shift by one year. Per window,
n_seeds agents are trained (warm-started from the previous window's best
checkpoint when one exists), the agent with the highest validation episode
reward is selected (ties to the lowest seed index), and that checkpoint
seeds the next window. Windows therefore run sequentially; the seeds inside
one window are independent.

Training and validation environments receive physically-sliced data that
ends strictly before the test span, and every window records that assertion
in the manifest, so out-of-sample data cannot be touched during training.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

from . import neural, ppo
from .market_data import FeaturePanel, PriceTable
from .replay_env import DEFAULT_INITIAL_CASH, DEFAULT_LOOKBACK, MarketSlice, ReplayEnv

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class WindowPlan:
    window_id: int
    train_span: tuple[date, date]  # inclusive trading-date endpoints
    val_span: tuple[date, date]
    test_span: tuple[date, date]
    n_seeds: int = 5
    seed_policy: str | None = None

    def __post_init__(self):
        if not (self.train_span[1] < self.val_span[0] <= self.val_span[1]
                < self.test_span[0] <= self.test_span[1]):
            raise ValueError("window spans must be chronological and non-overlapping")


def build_plan(
    dates: Sequence[date],
    train_years: int = 5,
    val_years: int = 1,
    test_years: int = 1,
    shift_years: int = 1,
    n_seeds: int = 5,
) -> list[WindowPlan]:
    """Maximal list of shifted windows fitting the trading-date range."""
    years = sorted({d.year for d in dates})
    first: dict[int, date] = {}
    last: dict[int, date] = {}
    for d in dates:
        if d.year not in first or d < first[d.year]:
            first[d.year] = d
        if d.year not in last or d > last[d.year]:
            last[d.year] = d
    span = train_years + val_years + test_years
    plans: list[WindowPlan] = []
    k = 0
    while True:
        y0 = years[0] + k * shift_years
        needed = list(range(y0, y0 + span))
        if not all(y in first for y in needed):
            break
        t0, t1 = y0, y0 + train_years - 1
        v0, v1 = t1 + 1, t1 + val_years
        s0, s1 = v1 + 1, v1 + test_years
        plans.append(WindowPlan(
            window_id=k,
            train_span=(first[t0], last[t1]),
            val_span=(first[v0], last[v1]),
            test_span=(first[s0], last[s1]),
            n_seeds=n_seeds,
        ))
        k += 1
    if not plans:
        logger.warning(
            "data range %s..%s cannot fit a %d-year window; empty plan",
            dates[0], dates[-1], span,
        )
    return plans


def select_best(scores: Sequence[float]) -> int:
    """Index of the highest validation score; ties go to the lowest index."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def span_indices(pt: PriceTable, span: tuple[date, date]) -> tuple[int, int]:
    """(first, last+1) row indices of the trading dates inside the span."""
    lo = next(i for i, d in enumerate(pt.dates) if d >= span[0])
    hi = max(i for i, d in enumerate(pt.dates) if d <= span[1])
    return lo, hi + 1


@dataclass
class SeedOutcome:
    seed: int
    checkpoint: str  # path relative to the campaign directory
    val_score: float


@dataclass
class WindowResult:
    window_id: int
    seeds: list[SeedOutcome]
    best_seed: int
    best_checkpoint: str
    leakage_check: dict

    def to_json(self, plan: WindowPlan) -> dict:
        return {
            "window_id": self.window_id,
            "train_span": [plan.train_span[0].isoformat(), plan.train_span[1].isoformat()],
            "val_span": [plan.val_span[0].isoformat(), plan.val_span[1].isoformat()],
            "test_span": [plan.test_span[0].isoformat(), plan.test_span[1].isoformat()],
            "seed_policy": plan.seed_policy,
            "seeds": [dataclasses.asdict(s) for s in self.seeds],
            "best_seed": self.best_seed,
            "best_checkpoint": self.best_checkpoint,
            "leakage_check": self.leakage_check,
        }


def run_window(
    plan: WindowPlan,
    pt: PriceTable,
    fp: FeaturePanel,
    config: ppo.PpoConfig,
    out_dir: str | Path,
    lookback: int = DEFAULT_LOOKBACK,
    initial_cash: float = DEFAULT_INITIAL_CASH,
    train_fn: Callable = ppo.train,
) -> WindowResult:
    """Train every seed of one window and select the best checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_lo, train_hi = span_indices(pt, plan.train_span)
    val_lo, val_hi = span_indices(pt, plan.val_span)
    test_lo, _ = span_indices(pt, plan.test_span)
    val_lo_warm = max(0, val_lo - lookback)  # warm-up reaches into the past only

    leakage = {
        "train_stop_index": train_hi,
        "val_stop_index": val_hi,
        "test_start_index": test_lo,
        "ok": bool(train_hi <= test_lo and val_hi <= test_lo),
    }
    if not leakage["ok"]:
        raise RuntimeError(f"window {plan.window_id} would read test-span data: {leakage}")

    train_slice = MarketSlice.build(pt, fp, train_lo, train_hi)
    val_slice = MarketSlice.build(pt, fp, val_lo_warm, val_hi)

    init = None
    if plan.seed_policy is not None:
        init, _ = neural.load_checkpoint(out_dir / plan.seed_policy)

    outcomes: list[SeedOutcome] = []
    for k in range(plan.n_seeds):
        seed = config.seed + 1000 * plan.window_id + k
        cfg = dataclasses.replace(config, seed=seed)
        train_envs = [ReplayEnv(train_slice, initial_cash=initial_cash, lookback=lookback)
                      for _ in range(cfg.n_envs)]
        val_env = ReplayEnv(val_slice, initial_cash=initial_cash, lookback=lookback)
        name = f"window{plan.window_id:02d}_seed{k}"
        result = train_fn(cfg, train_envs, val_env, init=init,
                          log_csv=out_dir / f"{name}_curve.csv")
        ckpt = f"{name}.npz"
        neural.save_checkpoint(result.best_params, out_dir / ckpt, extra_meta={
            "window_id": plan.window_id, "seed": k, "val_score": result.best_score,
        })
        outcomes.append(SeedOutcome(seed=k, checkpoint=ckpt, val_score=result.best_score))
        logger.info("window %d seed %d: val score %.6f", plan.window_id, k,
                    result.best_score)

    best = select_best([o.val_score for o in outcomes])
    return WindowResult(
        window_id=plan.window_id,
        seeds=outcomes,
        best_seed=best,
        best_checkpoint=outcomes[best].checkpoint,
        leakage_check=leakage,
    )


def run_campaign(
    plans: Sequence[WindowPlan],
    pt: PriceTable,
    fp: FeaturePanel,
    config: ppo.PpoConfig,
    out_dir: str | Path,
    lookback: int = DEFAULT_LOOKBACK,
    initial_cash: float = DEFAULT_INITIAL_CASH,
    config_hash: str | None = None,
    train_fn: Callable = ppo.train,
) -> dict:
    """Sequential campaign with seed-policy chaining and manifest-driven
    resume: windows whose checkpoints already exist are skipped."""
    if not plans:
        raise ValueError("empty window plan")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    manifest: dict = {"config_hash": config_hash, "windows": []}
    done_windows: dict[int, dict] = {}
    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text())
        for entry in previous.get("windows", []):
            if (out_dir / entry["best_checkpoint"]).exists():
                done_windows[entry["window_id"]] = entry

    seed_policy: str | None = None
    for plan in plans:
        if plan.window_id in done_windows:
            entry = done_windows[plan.window_id]
            logger.info("window %d already complete; skipping", plan.window_id)
        else:
            plan = dataclasses.replace(plan, seed_policy=seed_policy)
            result = run_window(plan, pt, fp, config, out_dir,
                                lookback=lookback, initial_cash=initial_cash,
                                train_fn=train_fn)
            entry = result.to_json(plan)
        manifest["windows"].append(entry)
        seed_policy = entry["best_checkpoint"]
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
