"""Point-in-time model inputs: vol-normalized returns and normalized MACD.

All series are computed per asset by forward recursions or trailing
windows, so the value at date t only ever reads closes at dates <= t.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .market_data import DataError, PricePanel

RETURN_HORIZONS = (1, 21, 63, 126, 252)
MACD_PAIRS = ((8, 24), (16, 48), (32, 96))
VOL_SPAN = 60
VOL_FLOOR = 1e-8
MACD_PRICE_STD_WINDOW = 63
MACD_SIGNAL_STD_WINDOW = 252
CPD_COLUMNS = ("cp_score", "cp_location_norm")


class JoinError(DataError):
    pass


def base_feature_names() -> list[str]:
    names = [f"norm_return_{h}" for h in RETURN_HORIZONS]
    names += [f"macd_{s}_{l}" for s, l in MACD_PAIRS]
    return names


def simple_returns(closes) -> np.ndarray:
    closes = np.asarray(closes, dtype=np.float64)
    if closes.ndim != 1 or len(closes) < 2:
        raise DataError("need at least two closes")
    if np.any(~np.isfinite(closes)) or np.any(closes <= 0):
        raise DataError("closes must be finite and > 0")
    return closes[1:] / closes[:-1] - 1.0


def ewma_vol(returns, span: int = VOL_SPAN, floor: float = VOL_FLOOR) -> np.ndarray:
    """Exponentially weighted standard deviation of daily returns.

    Decay is ``1 - 2/(span+1)``.  The running mean starts at the first return
    and the running variance at its square; afterwards the usual incremental
    update ``v <- decay * (v + (1-decay) * (r - m)^2)`` applies.
    """
    if span < 2:
        raise ValueError("span must be >= 2")
    r = np.asarray(returns, dtype=np.float64)
    lam = 1.0 - 2.0 / (span + 1.0)
    out = np.empty_like(r)
    if not len(r):
        return out
    m = r[0]
    v = r[0] * r[0]
    out[0] = max(math.sqrt(v), floor)
    for t in range(1, len(r)):
        d = r[t] - m
        m += (1.0 - lam) * d
        v = lam * (v + (1.0 - lam) * d * d)
        out[t] = max(math.sqrt(v), floor)
    return out


def norm_return(returns, vol, h: int) -> np.ndarray:
    """h-day compounded return scaled by ``vol_t * sqrt(h)``; NaN without h days of history."""
    if h not in RETURN_HORIZONS:
        raise ValueError(f"horizon {h} not in {RETURN_HORIZONS}")
    r = np.asarray(returns, dtype=np.float64)
    vol = np.asarray(vol, dtype=np.float64)
    out = np.full(len(r), np.nan)
    if len(r) < h:
        return out
    if h == 1:
        gross = r
    else:
        gross = np.prod(sliding_window_view(1.0 + r, h), axis=-1) - 1.0
    out[h - 1:] = gross / (vol[h - 1:] * math.sqrt(h))
    return out


def _ewma_halflife(x: np.ndarray, span: int) -> np.ndarray:
    decay = 0.5 ** (1.0 / span)
    out = np.empty_like(x)
    m = x[0]
    out[0] = m
    for t in range(1, len(x)):
        m = decay * m + (1.0 - decay) * x[t]
        out[t] = m
    return out


def _rolling_std(x: np.ndarray, window: int) -> np.ndarray:
    out = np.full(len(x), np.nan)
    valid = np.isfinite(x)
    if len(x) < window:
        return out
    wins = sliding_window_view(x, window)
    std = np.std(wins, axis=-1, ddof=1)
    full = np.all(sliding_window_view(valid, window), axis=-1)
    out[window - 1:] = np.where(full, std, np.nan)
    return out


def macd_raw(closes, short: int, long: int) -> np.ndarray:
    c = np.asarray(closes, dtype=np.float64)
    return _ewma_halflife(c, short) - _ewma_halflife(c, long)


def macd_signal(closes, short: int, long: int, floor: float = VOL_FLOOR) -> np.ndarray:
    """MACD normalized by 63-day price std, then by the 252-day std of that ratio."""
    if (short, long) not in MACD_PAIRS or short >= long:
        raise ValueError(f"unsupported MACD pair ({short}, {long})")
    c = np.asarray(closes, dtype=np.float64)
    m = macd_raw(c, short, long)
    q = m / np.maximum(_rolling_std(c, MACD_PRICE_STD_WINDOW), floor)
    q_std = _rolling_std(q, MACD_SIGNAL_STD_WINDOW)
    return q / np.maximum(q_std, floor)


@dataclass
class FeatureFrame:
    """Dense (date, asset, feature) block on the panel's common calendar."""

    dates: np.ndarray
    asset_ids: list[str]
    sector_index: np.ndarray
    feature_names: list[str]
    values: np.ndarray  # (n_dates, n_assets, n_features)
    ewma_vol: np.ndarray  # (n_dates, n_assets)
    next_return: np.ndarray  # (n_dates, n_assets); NaN on the final date
    extra: dict = field(default_factory=dict)

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.asset_ids)

    @property
    def has_cpd(self) -> bool:
        return all(c in self.feature_names for c in CPD_COLUMNS)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, :, self.feature_names.index(name)]

    def select(self, names) -> np.ndarray:
        idx = [self.feature_names.index(n) for n in names]
        return self.values[:, :, idx]

    def truncate(self, last_date) -> "FeatureFrame":
        keep = self.dates <= np.datetime64(last_date, "D")
        return FeatureFrame(self.dates[keep], list(self.asset_ids), self.sector_index.copy(),
                            list(self.feature_names), self.values[keep], self.ewma_vol[keep],
                            self.next_return[keep])

    def date_index(self, date) -> int:
        i = int(np.searchsorted(self.dates, np.datetime64(date, "D")))
        if i >= len(self.dates) or self.dates[i] != np.datetime64(date, "D"):
            raise KeyError(date)
        return i


def _asset_series(closes: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    n = len(closes)
    r = simple_returns(closes)
    vol = ewma_vol(r)
    feats = {}
    for h in RETURN_HORIZONS:
        full = np.full(n, np.nan)
        full[1:] = norm_return(r, vol, h)
        feats[f"norm_return_{h}"] = full
    for s, l in MACD_PAIRS:
        feats[f"macd_{s}_{l}"] = macd_signal(closes, s, l)
    vol_full = np.full(n, np.nan)
    vol_full[1:] = vol
    ret_full = np.full(n, np.nan)
    ret_full[1:] = r
    return feats, vol_full, ret_full


def build_features(panel: PricePanel, cpd_records: Mapping | None = None) -> FeatureFrame:
    """Assemble model inputs for every asset; warm-up rows are dropped.

    ``cpd_records`` maps ``asset_id`` to an iterable of changepoint records
    (anything with ``date``, ``cp_score`` and ``cp_location_norm``).
    """
    names = base_feature_names()
    n, n_assets = panel.closes.shape
    cols = []
    vols = np.empty((n, n_assets))
    rets = np.empty((n, n_assets))
    for j in range(n_assets):
        feats, vols[:, j], rets[:, j] = _asset_series(panel.closes[:, j])
        cols.append(np.stack([feats[k] for k in names], axis=-1))
    values = np.stack(cols, axis=1)

    if cpd_records is not None:
        date_pos = {d: i for i, d in enumerate(panel.dates.astype("datetime64[D]").tolist())}
        cp = np.full((n, n_assets, len(CPD_COLUMNS)), np.nan)
        ids = panel.asset_ids
        for asset_id, records in cpd_records.items():
            if asset_id not in ids:
                raise JoinError(f"changepoint records for unknown asset {asset_id}")
            j = ids.index(asset_id)
            for rec in records:
                d = np.datetime64(rec.date, "D").astype(object)
                i = date_pos.get(d)
                if i is None:
                    raise JoinError(f"changepoint record for {asset_id} on unknown date {d}")
                cp[i, j, 0] = rec.cp_score
                cp[i, j, 1] = rec.cp_location_norm
        values = np.concatenate([values, cp], axis=-1)
        names = names + list(CPD_COLUMNS)

    # next-day target, shifted per asset column; absent on the last date
    nxt = np.full((n, n_assets), np.nan)
    nxt[:-1] = rets[1:]

    ok = np.all(np.isfinite(values), axis=(1, 2)) & np.all(np.isfinite(vols), axis=1)
    first = int(np.argmax(ok)) if ok.any() else n
    keep = np.zeros(n, dtype=bool)
    keep[first:] = ok[first:]
    sectors = np.array([a.sector_index for a in panel.assets], dtype=np.int64)
    return FeatureFrame(panel.dates[keep].copy(), panel.asset_ids, sectors, names,
                        values[keep], vols[keep], nxt[keep])


def write_feature_csv(frame: FeatureFrame, path) -> None:
    """One row per (asset_id, date): features in frame order, then ewma_vol, next_return."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset_id", "sector_index", "date", *frame.feature_names, "ewma_vol", "next_return"])
        for j, a in enumerate(frame.asset_ids):
            for i, d in enumerate(frame.dates):
                nr = frame.next_return[i, j]
                w.writerow([a, int(frame.sector_index[j]), str(d),
                            *(repr(float(v)) for v in frame.values[i, j]),
                            repr(float(frame.ewma_vol[i, j])), "" if np.isnan(nr) else repr(float(nr))])


def read_feature_csv(path) -> FeatureFrame:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[3:-2]
        rows: dict[str, list] = {}
        sectors: dict[str, int] = {}
        for row in reader:
            rows.setdefault(row[0], []).append(row)
            sectors[row[0]] = int(row[1])
    ids = list(rows)
    dates = np.array([r[2] for r in rows[ids[0]]], dtype="datetime64[D]")
    n, a, f = len(dates), len(ids), len(names)
    values = np.empty((n, a, f))
    vol = np.empty((n, a))
    nxt = np.empty((n, a))
    for j, aid in enumerate(ids):
        block = rows[aid]
        if len(block) != n:
            raise DataError(f"feature file: asset {aid} has {len(block)} rows, expected {n}")
        for i, r in enumerate(block):
            values[i, j] = [float(x) for x in r[3:3 + f]]
            vol[i, j] = float(r[-2])
            nxt[i, j] = float(r[-1]) if r[-1] else np.nan
    return FeatureFrame(dates, ids, np.array([sectors[i] for i in ids], dtype=np.int64),
                        names, values, vol, nxt)
