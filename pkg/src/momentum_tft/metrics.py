"""Strategy baselines and the nine per-period performance metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .features import MACD_PAIRS, FeatureFrame
from .training import TRADING_DAYS, TrainConfig, strategy_returns

PHI_NORMALIZER = 0.89
METRIC_COLUMNS = ("returns", "vol", "sharpe", "downside_risk", "sortino", "max_drawdown",
                  "calmar", "pct_positive", "pl_ratio")
AVERAGE = "Average"


class MetricUndefinedError(ArithmeticError):
    pass


class FeatureError(KeyError):
    pass


def _series(returns, min_len: int) -> np.ndarray:
    r = np.asarray(returns, dtype=np.float64).reshape(-1)
    if len(r) < min_len:
        raise ValueError(f"need at least {min_len} returns, got {len(r)}")
    return r


def annualized_return(returns) -> float:
    return float(np.mean(_series(returns, 2)) * TRADING_DAYS)


def annualized_vol(returns) -> float:
    r = _series(returns, 2)
    if np.all(r == r[0]):
        # the rounded mean of a constant series can leave a ~1e-19 residue
        return 0.0
    return float(np.std(r, ddof=1) * math.sqrt(TRADING_DAYS))


def sharpe(returns) -> float:
    vol = annualized_vol(returns)
    if vol == 0.0:
        raise MetricUndefinedError("sharpe undefined: zero volatility")
    return annualized_return(returns) / vol


def downside_risk(returns) -> float:
    """Annualized semideviation about zero over all days."""
    r = _series(returns, 2)
    neg = np.minimum(r, 0.0)
    return float(math.sqrt(TRADING_DAYS) * math.sqrt(np.mean(neg * neg)))


def sortino(returns) -> float:
    dd = downside_risk(returns)
    if dd == 0.0:
        raise MetricUndefinedError("sortino undefined: no negative days")
    return annualized_return(returns) / dd


def max_drawdown(returns) -> float:
    r = _series(returns, 1)
    wealth = np.cumprod(1.0 + r)
    peak = np.maximum.accumulate(wealth)
    return float(np.max((peak - wealth) / peak))


def calmar(returns) -> float:
    mdd = max_drawdown(returns)
    if mdd == 0.0:
        raise MetricUndefinedError("calmar undefined: zero drawdown")
    return annualized_return(returns) / mdd


def pct_positive(returns) -> float:
    r = _series(returns, 1)
    return float(np.count_nonzero(r > 0) / len(r))


def profit_loss_ratio(returns) -> float:
    r = _series(returns, 1)
    wins, losses = r[r > 0], r[r < 0]
    if not len(wins) or not len(losses):
        raise MetricUndefinedError("profit/loss ratio undefined without both winning and losing days")
    return float(np.mean(wins) / abs(np.mean(losses)))


_METRIC_FNS = {
    "returns": annualized_return,
    "vol": annualized_vol,
    "sharpe": sharpe,
    "downside_risk": downside_risk,
    "sortino": sortino,
    "max_drawdown": max_drawdown,
    "calmar": calmar,
    "pct_positive": pct_positive,
    "pl_ratio": profit_loss_ratio,
}


@dataclass
class MetricRow:
    strategy: str
    period: str
    returns: float | None
    vol: float | None
    sharpe: float | None
    downside_risk: float | None
    sortino: float | None
    max_drawdown: float | None
    calmar: float | None
    pct_positive: float | None
    pl_ratio: float | None

    def values(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def metric_row(strategy: str, period: str, returns) -> MetricRow:
    """All nine metrics; undefined ones are None (rendered "n/a")."""
    vals = {}
    for name, fn in _METRIC_FNS.items():
        try:
            vals[name] = fn(returns)
        except (MetricUndefinedError, ValueError):
            vals[name] = None
    return MetricRow(strategy, period, **vals)


def average_row(strategy: str, rows) -> MetricRow:
    """Arithmetic mean of yearly metric values, skipping undefined years."""
    vals = {}
    for c in METRIC_COLUMNS:
        xs = [getattr(r, c) for r in rows if getattr(r, c) is not None]
        vals[c] = float(np.mean(xs)) if xs else None
    return MetricRow(strategy, AVERAGE, **vals)


def phi(y):
    """Momentum response curve y * exp(-y^2/4) / 0.89."""
    y = np.asarray(y, dtype=np.float64)
    return y * np.exp(-y * y / 4.0) / PHI_NORMALIZER


def baseline_positions(kind: str, frame: FeatureFrame) -> np.ndarray:
    """(n_dates, n_assets) positions for ``long_only`` or ``macd_momentum``."""
    shape = (frame.n_dates, frame.n_assets)
    if kind == "long_only":
        return np.ones(shape)
    if kind in ("macd_momentum", "momentum"):
        names = [f"macd_{s}_{l}" for s, l in MACD_PAIRS]
        missing = [n for n in names if n not in frame.feature_names]
        if missing:
            raise FeatureError(f"missing MACD features {missing}")
        signals = frame.select(names)
        return np.clip(np.mean(phi(signals), axis=-1), -1.0, 1.0)
    raise ValueError(f"unknown baseline {kind!r}")


@dataclass
class BacktestReport:
    rows: list[MetricRow]
    dates: np.ndarray
    daily_returns: dict  # strategy -> (n_dates,) returns dated by position date
    cumulative: dict  # strategy -> compounded wealth - 1


def _year(d) -> int:
    return int(str(np.datetime64(d, "Y")))


def strategy_daily_returns(dates, positions, frame: FeatureFrame, tcfg: TrainConfig | None = None):
    """Portfolio return earned by holding ``positions`` from each date to the next.

    Dates whose next-day return is unknown (the frame's final date) are
    dropped.  Returns ``(dates, returns)``.
    """
    tcfg = tcfg or TrainConfig()
    dates = np.asarray(dates, dtype="datetime64[D]")
    idx = np.array([frame.date_index(d) for d in dates], dtype=np.int64)
    r_next = frame.next_return[idx]
    ok = np.all(np.isfinite(r_next), axis=1)
    port = strategy_returns(np.asarray(positions)[ok], r_next[ok], frame.ewma_vol[idx][ok],
                            tcfg.vol_target, tcfg.transaction_cost_bp)
    return dates[ok], port


def report_from_returns(daily: Mapping[str, tuple], years=None) -> BacktestReport:
    """Per-year and Average metric rows from ``{strategy: (dates, returns)}``."""
    rows: list[MetricRow] = []
    cum = {}
    for name, (dates, port) in daily.items():
        port = np.asarray(port, dtype=np.float64)
        cum[name] = np.cumprod(1.0 + port) - 1.0
        year_of = np.array([_year(d) for d in dates], dtype=np.int64)
        present = sorted(set(year_of.tolist()))
        yearly = [metric_row(name, str(y), port[year_of == y])
                  for y in (years or present) if y in present]
        rows.extend(yearly)
        rows.append(average_row(name, yearly))
    # year blocks first, then the Average block
    periods = sorted({r.period for r in rows} - {AVERAGE}) + [AVERAGE]
    strategies = list(daily)
    rows.sort(key=lambda r: (periods.index(r.period), strategies.index(r.strategy)))
    first = next(iter(daily.values()))[0] if daily else np.array([], dtype="datetime64[D]")
    return BacktestReport(rows, first, dict(daily), cum)


def build_report(positions: Mapping[str, tuple], frame: FeatureFrame, tcfg: TrainConfig | None = None,
                 years=None) -> BacktestReport:
    """Per-year and Average metric rows for each strategy.

    ``positions`` maps strategy name to ``(dates, positions)`` with positions
    shaped (n_dates, n_assets) in frame asset order.  Returns are dated by
    the day the position is taken.
    """
    daily = {name: strategy_daily_returns(d, p, frame, tcfg) for name, (d, p) in positions.items()}
    return report_from_returns(daily, years)


def _fmt(v) -> str:
    return "n/a" if v is None else repr(float(v))


def write_report_csv(report: BacktestReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "period", *METRIC_COLUMNS])
        for r in report.rows:
            w.writerow([r.strategy, r.period, *(_fmt(v) for v in r.values())])


def write_cumulative_csv(report: BacktestReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "strategy", "cum_return"])
        for name, (dates, _) in report.daily_returns.items():
            for d, c in zip(dates, report.cumulative[name]):
                w.writerow([str(d), name, repr(float(c))])


def read_report_csv(path) -> list[MetricRow]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            vals = [None if v == "n/a" else float(v) for v in row[2:]]
            out.append(MetricRow(row[0], row[1], *vals))
    return out


def write_daily_returns_csv(daily: Mapping[str, tuple], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "strategy", "return"])
        for name, (dates, port) in daily.items():
            for d, r in zip(dates, port):
                w.writerow([str(d), name, repr(float(r))])


def read_daily_returns_csv(path) -> dict[str, tuple]:
    acc: dict[str, list] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for d, name, r in reader:
            acc.setdefault(name, []).append((d, float(r)))
    return {k: (np.array([d for d, _ in v], dtype="datetime64[D]"), np.array([r for _, r in v]))
            for k, v in acc.items()}
