"""Command-line entry point: data prep, training campaigns, backtests,
comparisons, all driven by one JSON config file (flags override fields).

Every run is reproducible from the config plus its global seed; the
campaign manifest records the config hash. Exit codes: 0 success, 1
validation error (bad config/data), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import market_data as md
from . import mvo, neural, ppo, protocol

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_assets: int = 4
    n_days: int = 2520
    drift: float = 0.06
    vol: float = 0.18
    corr: float = 0.3
    seed: int = 7
    start_year: int = 2006

    def generate(self) -> md.PriceTable:
        corr = np.full((self.n_assets, self.n_assets), self.corr)
        np.fill_diagonal(corr, 1.0)
        drifts = self.drift + 0.02 * np.arange(self.n_assets)  # distinct assets
        return md.generate_gbm(
            n_assets=self.n_assets, n_days=self.n_days, drifts=drifts,
            vols=np.full(self.n_assets, self.vol), corr=corr, seed=self.seed,
            start_date=datetime(self.start_year, 1, 2).date(),
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    csv_path: str | None = None
    synthetic: SyntheticSpec | None = None
    train_years: int = 5
    val_years: int = 1
    test_years: int = 1
    shift_years: int = 1
    n_seeds: int = 5
    ppo: ppo.PpoConfig = ppo.DESK_CONFIG
    mvo_window: int = 60
    mvo_rf: float = 0.0
    lookback: int = 60
    initial_cash: float = 100_000.0

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        allowed = {"seed", "out_dir", "data", "windows", "ppo", "mvo", "backtest"}
        _reject_unknown(raw, allowed, "top level")
        kwargs: dict = {}
        if "seed" in raw:
            kwargs["seed"] = int(raw["seed"])
        if "out_dir" in raw:
            kwargs["out_dir"] = str(raw["out_dir"])

        data = raw.get("data", {})
        _reject_unknown(data, {"csv", "synthetic"}, "data")
        if "csv" in data and "synthetic" in data:
            raise ConfigError("data: give either 'csv' or 'synthetic', not both")
        if "csv" in data:
            kwargs["csv_path"] = str(data["csv"])
        if "synthetic" in data:
            syn = data["synthetic"]
            _reject_unknown(syn, {f.name for f in dataclasses.fields(SyntheticSpec)},
                            "data.synthetic")
            kwargs["synthetic"] = SyntheticSpec(**syn)

        windows = raw.get("windows", {})
        _reject_unknown(windows, {"train_years", "val_years", "test_years",
                                  "shift_years", "n_seeds"}, "windows")
        kwargs.update({k: int(v) for k, v in windows.items()})

        ppo_raw = dict(raw.get("ppo", {}))
        preset = ppo_raw.pop("preset", "desk")
        if preset not in ("desk", "paper"):
            raise ConfigError(f"unknown ppo preset '{preset}'")
        base = ppo.PAPER_CONFIG if preset == "paper" else ppo.DESK_CONFIG
        _reject_unknown(ppo_raw, {f.name for f in dataclasses.fields(ppo.PpoConfig)},
                        "ppo")
        if "hidden" in ppo_raw:
            ppo_raw["hidden"] = tuple(ppo_raw["hidden"])
        kwargs["ppo"] = dataclasses.replace(base, **ppo_raw)

        mvo_raw = raw.get("mvo", {})
        _reject_unknown(mvo_raw, {"window", "rf"}, "mvo")
        if "window" in mvo_raw:
            kwargs["mvo_window"] = int(mvo_raw["window"])
        if "rf" in mvo_raw:
            kwargs["mvo_rf"] = float(mvo_raw["rf"])

        bt_raw = raw.get("backtest", {})
        _reject_unknown(bt_raw, {"lookback", "initial_cash"}, "backtest")
        if "lookback" in bt_raw:
            kwargs["lookback"] = int(bt_raw["lookback"])
        if "initial_cash" in bt_raw:
            kwargs["initial_cash"] = float(bt_raw["initial_cash"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(_as_jsonable(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _as_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _as_jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_as_jsonable(x) for x in obj]
    return obj


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            _deep_set(raw, key, value)
    return RunConfig.from_dict(raw)


def _deep_set(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def resolve_out_dir(config: RunConfig, cli_out: str | None) -> Path:
    if cli_out:
        out = Path(cli_out)
    elif config.out_dir:
        out = Path(config.out_dir)
    else:
        out = Path("runs") / datetime.now().strftime("%Y%m%d-%H%M%S")
    out.mkdir(parents=True, exist_ok=True)
    return out


def prepare_table(config: RunConfig) -> md.PriceTable:
    if config.csv_path is not None:
        return md.load_prices(config.csv_path)
    spec = config.synthetic or SyntheticSpec(seed=config.seed)
    return spec.generate()


def cmd_data(args: argparse.Namespace) -> int:
    overrides = {}
    if args.csv:
        overrides["data.csv"] = args.csv
    if args.synthetic is not None:
        syn = _parse_kv(args.synthetic, {"assets": "n_assets", "days": "n_days",
                                         "seed": "seed", "drift": "drift",
                                         "vol": "vol", "corr": "corr"})
        overrides["data.synthetic"] = syn
    config = load_config(args.config, overrides)
    out = resolve_out_dir(config, args.out)
    pt = prepare_table(config)
    panel = md.compute_returns(pt)
    features = md.compute_features(pt)
    md.write_prices_csv(pt, out / "prices.csv")
    md.write_features_csv(features, out / "features.csv")
    _write_returns_csv(panel, pt.asset_names, out / "returns.csv")
    print(f"{pt.n_days} days x {pt.n_assets} assets "
          f"[{pt.dates[0].isoformat()} .. {pt.dates[-1].isoformat()}] -> {out}")
    return 0


def _write_returns_csv(panel: md.ReturnPanel, names, path: Path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + [f"{n}_log" for n in names]
                        + [f"{n}_simple" for n in names])
        for i, d in enumerate(panel.dates):
            writer.writerow([d.isoformat()]
                            + [repr(float(x)) for x in panel.log_returns[i]]
                            + [repr(float(x)) for x in panel.simple_returns[i]])


def _parse_kv(pairs: list[str], mapping: dict) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        if key not in mapping:
            raise ConfigError(f"unknown synthetic parameter '{key}'")
        field = mapping[key]
        out[field] = float(value) if field in ("drift", "vol", "corr") else int(value)
    return out


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {"ppo.preset": args.preset}
    if args.timesteps:
        overrides["ppo.total_timesteps"] = args.timesteps
    config = load_config(args.config, overrides)
    out = resolve_out_dir(config, args.out)
    pt = prepare_table(config)
    fp = md.compute_features(pt)
    plans = protocol.build_plan(
        pt.dates, train_years=config.train_years, val_years=config.val_years,
        test_years=config.test_years, shift_years=config.shift_years,
        n_seeds=config.n_seeds,
    )
    if not plans:
        raise ConfigError("data range too short for a single train/val/test window")
    cfg = dataclasses.replace(config.ppo, seed=config.seed)
    manifest = protocol.run_campaign(
        plans, pt, fp, cfg, out, lookback=config.lookback,
        initial_cash=config.initial_cash, config_hash=config.config_hash(),
    )
    print(f"campaign complete: {len(manifest['windows'])} windows -> "
          f"{out / protocol.MANIFEST_NAME}")
    return 0


def cmd_backtest(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = resolve_out_dir(config, args.out or args.campaign)
    campaign = Path(args.campaign) if args.campaign else out
    manifest_path = campaign / protocol.MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"no campaign manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())

    pt = prepare_table(config)
    fp = md.compute_features(pt)
    panel = md.compute_returns(pt)
    bt_dir = campaign / "backtests"
    bt_dir.mkdir(exist_ok=True)
    n_reports = 0
    for entry in manifest["windows"]:
        reports = backtest_window(entry, pt, fp, panel, campaign, config)
        for rep in reports:
            stem = f"window{entry['window_id']:02d}_{rep.strategy}"
            if rep.seed is not None:
                stem += f"_seed{rep.seed}"
            bt.write_report_json(rep, bt_dir / f"{stem}.json")
            bt.write_report_csv(rep, bt_dir / f"{stem}.csv")
            n_reports += 1
    print(f"{n_reports} backtest reports -> {bt_dir}")
    return 0


def backtest_window(entry: dict, pt: md.PriceTable, fp: md.FeaturePanel,
                    panel: md.ReturnPanel, campaign: Path,
                    config: RunConfig) -> list[bt.BacktestReport]:
    """All DRL seeds plus the solver baseline for one test span."""
    window_id = entry["window_id"]
    span = (datetime.fromisoformat(entry["test_span"][0]).date(),
            datetime.fromisoformat(entry["test_span"][1]).date())
    lo, hi = protocol.span_indices(pt, span)
    market = bt.MarketSlice.build(pt, fp, lo - config.lookback, hi)

    # solver weights for decision dates [lo, hi-2]: panel rows lo-1 .. hi-3
    sub = md.slice_panel(panel, lo - 1 - config.mvo_window, hi - 1)
    series = mvo.mvo_backtest_weights(sub, window=config.mvo_window, rf=config.mvo_rf)
    reports = [bt.run_backtest(bt.MvoStrategy(series), market, "mvo",
                               initial_cash=config.initial_cash,
                               lookback=config.lookback, window_id=window_id)]
    for seed_entry in entry["seeds"]:
        params, _ = neural.load_checkpoint(campaign / seed_entry["checkpoint"])
        reports.append(bt.run_backtest(
            bt.DrlStrategy(params), market, "drl",
            initial_cash=config.initial_cash, lookback=config.lookback,
            window_id=window_id, seed=seed_entry["seed"],
        ))
    return reports


def cmd_compare(args: argparse.Namespace) -> int:
    campaign = Path(args.campaign)
    bt_dir = campaign / "backtests"
    paths = sorted(bt_dir.glob("*.json")) if bt_dir.exists() else []
    if not paths:
        raise ConfigError(f"no backtest reports under {bt_dir}")
    reports = [read_report(p) for p in paths]
    comparison = bt.compare(reports)
    bt.write_comparison_csv(comparison, campaign / "comparison.csv")
    bt.write_plot_csv(reports, campaign / "plot_data.csv")
    tags = sorted(comparison.strategies)
    print("metric".ljust(20) + "".join(t.rjust(14) for t in tags))
    for key in bt.METRIC_KEYS:
        row = key.ljust(20)
        for t in tags:
            row += f"{comparison.strategies[t][key]:14.4f}"
        print(row)
    print(f"table -> {campaign / 'comparison.csv'}; "
          f"plot data -> {campaign / 'plot_data.csv'}")
    return 0


def read_report(json_path: Path) -> bt.BacktestReport:
    """Rehydrate a report from its JSON summary plus the per-day CSV."""
    payload = json.loads(json_path.read_text())
    csv_path = json_path.with_suffix(".csv")
    if not csv_path.exists():
        raise ConfigError(f"missing per-day CSV for report {json_path}")
    rows = [line.split(",") for line in
            csv_path.read_text().strip().splitlines()[1:]]
    dates = tuple(datetime.fromisoformat(r[0]).date() for r in rows)
    values = np.array([float(r[1]) for r in rows])
    weights = np.array([[float(x) for x in r[2:-1]] for r in rows])
    dpw = np.array([float(r[-1]) for r in rows])
    return bt.BacktestReport(
        strategy=payload["strategy"],
        span=(dates[0], dates[-1]),
        dates=dates,
        values=values,
        returns=values[1:] / values[:-1] - 1.0,
        weights=weights,
        dpw=dpw,
        metrics=payload["metrics"],
        window_id=payload["window_id"],
        seed=payload["seed"],
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alloclab",
        description="Portfolio-allocation research engine: replay-trained "
                    "policy vs rolling mean-variance baseline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="ingest a CSV or generate synthetic prices")
    p_data.add_argument("--config", default=None)
    p_data.add_argument("--csv", default=None, help="price CSV to ingest")
    p_data.add_argument("--synthetic", nargs="*", metavar="KEY=VALUE", default=None,
                        help="e.g. assets=4 days=2520 seed=7")
    p_data.add_argument("--out", default=None)
    p_data.set_defaults(func=cmd_data)

    p_train = sub.add_parser("train", help="run a sliding-window training campaign")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--preset", choices=["desk", "paper"], default=None)
    p_train.add_argument("--timesteps", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_bt = sub.add_parser("backtest", help="backtest every agent and the baseline")
    p_bt.add_argument("--config", default=None)
    p_bt.add_argument("--campaign", default=None, help="campaign directory")
    p_bt.add_argument("--out", default=None)
    p_bt.set_defaults(func=cmd_backtest)

    p_cmp = sub.add_parser("compare", help="summary table and plot CSVs")
    p_cmp.add_argument("--campaign", required=True)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, md.DataError, mvo.MvoError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
