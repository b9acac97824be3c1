"""Close-price ingestion, point-in-time guard and walk-forward splits."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SECTORS = (
    "Agriculture",
    "Mining",
    "Construction",
    "Manufacturing",
    "Transport/Utilities",
    "Wholesale",
    "Retail",
    "Finance",
    "Services",
)
SECTOR_INDEX = {name: i for i, name in enumerate(SECTORS)}

CSV_HEADER = ("asset_id", "ticker", "date", "close", "sector_group")


class DataError(ValueError):
    """Malformed or invalid input data."""


class ParseError(DataError):
    def __init__(self, path, line: int, msg: str):
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


class PITViolationError(DataError):
    """Duplicate (asset_id, date) rows, the duplicate-listing leakage case."""

    def __init__(self, asset_id: str, date: dt.date):
        self.asset_id = asset_id
        self.date = date
        super().__init__(f"PIT violation: duplicate bar for asset {asset_id} on {date.isoformat()}")


class UniverseError(DataError):
    pass


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class PriceBar:
    asset_id: str
    date: dt.date
    close: float
    ticker: str = ""
    sector_group: str = "Manufacturing"


@dataclass(frozen=True)
class AssetMeta:
    asset_id: str
    ticker: str
    sector_group: str

    def __post_init__(self):
        if self.sector_group not in SECTOR_INDEX:
            raise DataError(f"unknown sector_group {self.sector_group!r} for {self.asset_id}")

    @property
    def sector_index(self) -> int:
        return SECTOR_INDEX[self.sector_group]


@dataclass
class PricePanel:
    dates: np.ndarray  # datetime64[D], strictly increasing
    assets: list[AssetMeta]
    closes: np.ndarray  # (n_dates, n_assets)
    warnings: list[str] = field(default_factory=list)

    @property
    def asset_ids(self) -> list[str]:
        return [a.asset_id for a in self.assets]

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    def truncate(self, last_date) -> "PricePanel":
        """Keep only dates <= ``last_date``."""
        keep = self.dates <= np.datetime64(last_date, "D")
        return PricePanel(self.dates[keep].copy(), list(self.assets),
                          self.closes[keep].copy(), list(self.warnings))

    def equals(self, other: "PricePanel") -> bool:
        return (np.array_equal(self.dates, other.dates) and self.assets == other.assets
                and np.array_equal(self.closes, other.closes))


@dataclass(frozen=True)
class WalkForwardSplit:
    train_start: dt.date
    train_end: dt.date
    test_start: dt.date
    test_end: dt.date
    validation_fraction: float = 0.20

    @property
    def test_year(self) -> int:
        return self.test_start.year


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def load_price_csv(path) -> list[PriceBar]:
    """Parse ``asset_id,ticker,date,close,sector_group`` rows in file order."""
    path = Path(path)
    bars: list[PriceBar] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(path, lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            asset_id, ticker, date_s, close_s, sector = (c.strip() for c in row)
            try:
                date = _parse_date(date_s)
            except ValueError:
                raise ParseError(path, lineno, f"bad ISO date {date_s!r}") from None
            try:
                close = float(close_s)
            except ValueError:
                raise ParseError(path, lineno, f"bad close {close_s!r}") from None
            if not np.isfinite(close) or close <= 0:
                raise DataError(f"{path}:{lineno}: close must be > 0, got {close_s}")
            if sector not in SECTOR_INDEX:
                raise ParseError(path, lineno, f"unknown sector_group {sector!r}")
            if not asset_id:
                raise ParseError(path, lineno, "empty asset_id")
            bars.append(PriceBar(asset_id, date, close, ticker, sector))
    return bars


def pit_guard(bars: Iterable[PriceBar], warn_stream=None) -> PricePanel:
    """Reject duplicate listings, then align assets on a common calendar.

    The panel spans the intersection of the assets' date ranges; an asset
    missing any date inside that range is excluded (no forward fill), with a
    ``WARN excluded <asset_id> <reason>`` line written to stderr.
    """
    warn_stream = sys.stderr if warn_stream is None else warn_stream
    series: dict[str, dict[dt.date, float]] = {}
    meta: dict[str, AssetMeta] = {}
    for bar in bars:
        per_asset = series.setdefault(bar.asset_id, {})
        if bar.date in per_asset:
            raise PITViolationError(bar.asset_id, bar.date)
        per_asset[bar.date] = bar.close
        if bar.asset_id not in meta:
            meta[bar.asset_id] = AssetMeta(bar.asset_id, bar.ticker or bar.asset_id, bar.sector_group)

    if len(series) < 2:
        raise UniverseError(f"need at least 2 assets, got {len(series)}")

    order = sorted(series)
    all_dates = sorted(set().union(*(s.keys() for s in series.values())))
    warnings: list[str] = []

    # Assets whose first/last date sit far inside the calendar would shrink
    # the intersection for everyone; drop those with the shortest coverage
    # until the rest jointly cover one contiguous calendar.
    first = {a: min(series[a]) for a in order}
    last = {a: max(series[a]) for a in order}
    kept = list(order)
    while True:
        start = max(first[a] for a in kept)
        end = min(last[a] for a in kept)
        lo = min(first[a] for a in kept)
        hi = max(last[a] for a in kept)
        calendar = [d for d in all_dates if start <= d <= end]
        full_span = sum(1 for d in all_dates if lo <= d <= hi)
        bad = []
        for a in kept:
            missing = sum(1 for d in calendar if d not in series[a])
            coverage = len(series[a])
            if missing:
                bad.append((coverage, a, f"missing {missing} dates inside panel range"))
            elif coverage < 0.75 * full_span:
                bad.append((coverage, a, f"covers {coverage} of {full_span} dates"))
        if not bad:
            break
        bad.sort()
        coverage, victim, reason = bad[0]
        kept.remove(victim)
        warnings.append(f"WARN excluded {victim} {reason}")
        if len(kept) < 2:
            for w in warnings:
                print(w, file=warn_stream)
            raise UniverseError(f"fewer than 2 assets survive alignment ({len(kept)})")

    for w in warnings:
        print(w, file=warn_stream)

    dates = np.array(calendar, dtype="datetime64[D]")
    closes = np.array([[series[a][d] for a in kept] for d in calendar], dtype=np.float64)
    return PricePanel(dates, [meta[a] for a in kept], closes.reshape(len(calendar), len(kept)), warnings)


def write_price_csv(panel: PricePanel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for j, a in enumerate(panel.assets):
            for i, d in enumerate(panel.dates):
                w.writerow([a.asset_id, a.ticker, str(d), repr(float(panel.closes[i, j])), a.sector_group])


def load_panel(path, warn_stream=None) -> PricePanel:
    return pit_guard(load_price_csv(path), warn_stream=warn_stream)


def _as_date(d) -> dt.date:
    if isinstance(d, dt.date):
        return d
    return np.datetime64(d, "D").astype(dt.date)


def make_walk_forward(dates: Sequence, first_test_year: int, last_test_year: int,
                      validation_fraction: float = 0.20) -> list[WalkForwardSplit]:
    """Expanding-window splits: split k trains on everything before Jan 1 of
    ``first_test_year + k`` and tests on that calendar year."""
    if not 0.0 < validation_fraction < 1.0:
        raise RangeError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
    if last_test_year < first_test_year:
        raise RangeError("last_test_year precedes first_test_year")
    ds = sorted(_as_date(d) for d in dates)
    if not ds:
        raise RangeError("empty calendar")
    first = ds[0]
    # the first trading day of a year can fall as late as Jan 7 after holidays
    if first > dt.date(first_test_year - 1, 1, 7):
        raise RangeError(f"need at least one full year of history before {first_test_year}; "
                         f"data starts {first.isoformat()}")
    splits = []
    for year in range(first_test_year, last_test_year + 1):
        boundary = dt.date(year, 1, 1)
        train = [d for d in ds if d < boundary]
        test = [d for d in ds if boundary <= d < dt.date(year + 1, 1, 1)]
        if not test:
            raise RangeError(f"no data in test year {year}")
        splits.append(WalkForwardSplit(train[0], train[-1], test[0], test[-1], validation_fraction))
    return splits


def split_train_validation(n_train: int, validation_fraction: float) -> int:
    """Index of the first validation date within a training range of ``n_train`` dates."""
    n_val = int(round(n_train * validation_fraction))
    n_val = min(max(n_val, 1), n_train - 1)
    return n_train - n_val
