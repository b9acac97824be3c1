"""Command-line pipeline: ingest, cpd, features, train, backtest, report.

Every stage reads and writes plain files inside ``--out-dir``:

    ingest    prices csv            -> panel.csv
    cpd       panel.csv             -> cpd_<lookback>/<asset_id>.csv
    features  panel.csv [+ cpd]     -> features.csv
    train     features.csv          -> checkpoints/*.npz, positions_*.csv
    backtest  positions_*.csv       -> daily_returns.csv
    report    daily_returns.csv     -> report.csv, cumulative_returns.csv

Exit codes: 0 success, 1 data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import changepoint, features, market_data, metrics, training
from .market_data import DataError, RangeError

logger = logging.getLogger("momentum_tft")

EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2
SUPPORTED_WINDOWS = (252, 378)
SUPPORTED_HEADS = (4, 6)
BASELINE_KINDS = ("long_only", "momentum")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    kind: str
    window: int = 252
    heads: int = 4

    def __post_init__(self):
        if self.kind not in training.MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {training.MODEL_KINDS}")
        if self.kind in training.NEURAL_KINDS:
            if self.window not in SUPPORTED_WINDOWS:
                raise ConfigError(f"window {self.window} not in {SUPPORTED_WINDOWS}")
            if self.heads not in SUPPORTED_HEADS:
                raise ConfigError(f"heads {self.heads} not in {SUPPORTED_HEADS}")

    @property
    def tag(self) -> str:
        """Table-style subscript naming: ``tft_252_4``; baselines carry no subscript."""
        if self.kind in BASELINE_KINDS:
            return self.kind
        return f"{self.kind}_{self.window}_{self.heads}"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, dict):
            return cls(**value)
        parts = str(value).split(":")
        try:
            return cls(parts[0], *(int(p) for p in parts[1:]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad variant {value!r}: {exc}") from None


@dataclass
class RunConfig:
    """Flat, dotted-key run configuration.  See README for the key list."""

    prices: str | None = None
    cpd: str = "compute"
    out_dir: str = "run"
    variants: list = field(default_factory=lambda: [Variant("tft"), Variant("long_only"),
                                                    Variant("momentum")])
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    d_hidden: int = 32
    dropout_rate: float = 0.1
    cpd_lookback: int = changepoint.DEFAULT_LOOKBACK
    first_test_year: int = 2020
    last_test_year: int = 2023
    validation_fraction: float = 0.2
    seed: int = 0
    threads: int = 1

    def validate(self) -> "RunConfig":
        if self.cpd_lookback not in changepoint.SUPPORTED_LOOKBACKS:
            raise ConfigError(f"cpd.lookback must be one of {changepoint.SUPPORTED_LOOKBACKS}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.first_test_year > self.last_test_year:
            raise ConfigError("walk_forward.first_test_year is after last_test_year")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("walk_forward.validation_fraction must lie in (0, 1)")
        for v in self.variants:
            if v.kind in training.NEURAL_KINDS:
                try:
                    training.TFTConfig(window=v.window, n_heads=v.heads, d_hidden=self.d_hidden,
                                       dropout_rate=self.dropout_rate)
                except ValueError as exc:
                    raise ConfigError(f"variant {v.tag}: {exc}") from None
        return self

    @property
    def needs_cpd(self) -> bool:
        return any(v.kind in ("tft_cpd", "lstm_cpd") for v in self.variants)


_TRAIN_KEYS = {f.name for f in fields(training.TrainConfig)} - {"seed"}
_SIMPLE_KEYS = {
    "paths.prices": "prices",
    "paths.cpd": "cpd",
    "paths.out_dir": "out_dir",
    "model.d_hidden": "d_hidden",
    "model.dropout_rate": "dropout_rate",
    "cpd.lookback": "cpd_lookback",
    "walk_forward.first_test_year": "first_test_year",
    "walk_forward.last_test_year": "last_test_year",
    "walk_forward.validation_fraction": "validation_fraction",
    "seed": "seed",
    "threads": "threads",
}
CONFIG_KEYS = tuple(sorted([*_SIMPLE_KEYS, "model.variants", *(f"train.{k}" for k in _TRAIN_KEYS)]))


def config_from_mapping(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    train_kw = {}
    try:
        for key, value in data.items():
            if key in _SIMPLE_KEYS:
                attr = _SIMPLE_KEYS[key]
                default = getattr(cfg, attr)
                setattr(cfg, attr, type(default)(value) if default is not None else value)
            elif key == "model.variants":
                cfg.variants = [Variant.parse(v) for v in value]
            else:
                train_kw[key.split(".", 1)[1]] = value
        cfg.train = training.TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    return config_from_mapping(data)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "prices", None):
        cfg.prices = args.prices
    if getattr(args, "lookback", None):
        cfg.cpd_lookback = args.lookback
    if getattr(args, "variants", None):
        cfg.variants = [Variant.parse(v) for v in args.variants]
    cfg.train = replace(cfg.train, seed=cfg.seed)
    return cfg.validate()


# stage helpers

def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _panel(cfg: RunConfig) -> market_data.PricePanel:
    path = _out(cfg) / "panel.csv"
    if not path.exists():
        raise DataError(f"{path} not found; run `ingest` first")
    return market_data.load_panel(path)


def _cpd_dir(cfg: RunConfig) -> Path:
    if cfg.cpd != "compute":
        return Path(cfg.cpd)
    return _out(cfg) / f"cpd_{cfg.cpd_lookback}"


def _frame(cfg: RunConfig) -> features.FeatureFrame:
    path = _out(cfg) / "features.csv"
    if not path.exists():
        raise DataError(f"{path} not found; run `features` first")
    return features.read_feature_csv(path)


def _splits(cfg: RunConfig, frame: features.FeatureFrame):
    return market_data.make_walk_forward(frame.dates, cfg.first_test_year, cfg.last_test_year,
                                         cfg.validation_fraction)


def _positions_path(cfg: RunConfig, variant: Variant) -> Path:
    return _out(cfg) / f"positions_{variant.tag}.csv"


# commands

def cmd_ingest(cfg: RunConfig) -> dict:
    if not cfg.prices:
        raise ConfigError("no price file: pass --prices or set paths.prices")
    panel = market_data.load_panel(cfg.prices, warn_stream=sys.stderr)
    market_data.write_price_csv(panel, _out(cfg) / "panel.csv")
    summary = {"assets": len(panel.assets), "dates": len(panel.dates),
               "first_date": str(panel.dates[0]), "last_date": str(panel.dates[-1]),
               "excluded": len(panel.warnings)}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_cpd(cfg: RunConfig) -> Path:
    panel = _panel(cfg)
    out = _out(cfg) / f"cpd_{cfg.cpd_lookback}"
    out.mkdir(exist_ok=True)
    records = changepoint.run_cpd(panel, cfg.cpd_lookback, cfg.seed, cfg.threads)
    for asset_id, recs in records.items():
        changepoint.write_cpd_csv(recs, out / f"{asset_id}.csv")
    logger.info("wrote changepoint records for %d assets to %s", len(records), out)
    return out


def cmd_features(cfg: RunConfig) -> Path:
    panel = _panel(cfg)
    cpd = None
    cpd_dir = _cpd_dir(cfg)
    if cfg.needs_cpd:
        if not cpd_dir.is_dir():
            raise DataError(f"changepoint directory {cpd_dir} not found; run `cpd` first")
        cpd = {}
        for a in panel.asset_ids:
            path = cpd_dir / f"{a}.csv"
            if not path.exists():
                raise DataError(f"missing changepoint file {path}")
            cpd[a] = changepoint.read_cpd_csv(path)
    frame = features.build_features(panel, cpd)
    path = _out(cfg) / "features.csv"
    features.write_feature_csv(frame, path)
    logger.info("wrote %d dates x %d assets x %d features to %s", frame.n_dates, frame.n_assets,
                len(frame.feature_names), path)
    return path


def cmd_train(cfg: RunConfig) -> list[Path]:
    frame = _frame(cfg)
    splits = _splits(cfg, frame)
    ckpt_dir = _out(cfg) / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    written = []
    for v in cfg.variants:
        model_cfg = None
        if v.kind in training.NEURAL_KINDS:
            model_cfg = training.make_config(frame, v.kind, window=v.window, n_heads=v.heads,
                                             d_hidden=cfg.d_hidden, dropout_rate=cfg.dropout_rate,
                                             seed=cfg.seed)
        logger.info("walk-forward for %s", v.tag)
        result = training.walk_forward(frame, splits, v.kind, model_cfg, cfg.train, ckpt_dir, v.tag)
        path = _positions_path(cfg, v)
        training.write_positions_csv(result, path)
        written.append(path)
    return written


def cmd_backtest(cfg: RunConfig) -> Path:
    frame = _frame(cfg)
    daily = {}
    for v in cfg.variants:
        path = _positions_path(cfg, v)
        if not path.exists():
            raise DataError(f"{path} not found; run `train` first")
        dates, ids, pos = training.read_positions_csv(path)
        if ids != frame.asset_ids:
            raise DataError(f"{path}: asset columns do not match the feature file")
        daily[v.tag] = metrics.strategy_daily_returns(dates, pos, frame, cfg.train)
    path = _out(cfg) / "daily_returns.csv"
    metrics.write_daily_returns_csv(daily, path)
    return path


def cmd_report(cfg: RunConfig) -> Path:
    src = _out(cfg) / "daily_returns.csv"
    if not src.exists():
        raise DataError(f"{src} not found; run `backtest` first")
    daily = metrics.read_daily_returns_csv(src)
    wanted = [v.tag for v in cfg.variants]
    missing = [t for t in wanted if t not in daily]
    if missing:
        raise DataError(f"daily returns lack strategies {missing}")
    years = list(range(cfg.first_test_year, cfg.last_test_year + 1))
    report = metrics.report_from_returns({t: daily[t] for t in wanted}, years)
    out = _out(cfg)
    metrics.write_report_csv(report, out / "report.csv")
    metrics.write_cumulative_csv(report, out / "cumulative_returns.csv")
    for row in report.rows:
        if row.period == metrics.AVERAGE:
            ret = "n/a" if row.returns is None else f"{100 * row.returns:.2f}%"
            shp = "n/a" if row.sharpe is None else f"{row.sharpe:.2f}"
            print(f"{row.strategy:<20} average return {ret:>8}  sharpe {shp}")
    return out / "report.csv"


COMMANDS = {
    "ingest": cmd_ingest,
    "cpd": cmd_cpd,
    "features": cmd_features,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "report": cmd_report,
}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the verb-level copy must not reset values given before the verb
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted config keys", **kw)
    common.add_argument("--seed", type=int, help="global seed (overrides config)", **kw)
    common.add_argument("--threads", type=int, help="worker threads for changepoint detection", **kw)
    common.add_argument("--out-dir", dest="out_dir", help="artifact directory", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momentum-tft", description=__doc__.split("\n")[0],
                                     parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="validate a price file")
    p.add_argument("--prices", help="price CSV (asset_id,ticker,date,close,sector_group)")
    p = sub.add_parser("cpd", parents=[common], help="run GP changepoint detection")
    p.add_argument("--lookback", type=int, help="changepoint window length (21 or 126)")
    sub.add_parser("features", parents=[common], help="build model inputs")
    for name, helptext in (("train", "walk-forward training and prediction"),
                           ("backtest", "daily strategy returns"),
                           ("report", "per-year metrics and cumulative returns")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--variant", dest="variants", action="append",
                       help="kind[:window:heads], e.g. tft:252:4 or long_only; repeatable")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RangeError, features.JoinError, metrics.FeatureError) as exc:
        print(f"{type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
