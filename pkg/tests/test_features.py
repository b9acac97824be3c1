import math
import statistics

import numpy as np
import pytest

from momentum_tft import features as ft
from momentum_tft.changepoint import ChangepointRecord
from momentum_tft.market_data import DataError
from momentum_tft.synthetic import momentum_panel, random_walk_panel


# simple returns

def test_simple_returns_examples():
    np.testing.assert_allclose(ft.simple_returns([100, 101]), [0.01], rtol=1e-15)
    assert np.all(ft.simple_returns([5.0] * 6) == 0.0)
    assert ft.simple_returns([100, 50, 100]).tolist() == [-0.5, 1.0]


@pytest.mark.parametrize("closes", [[100, 0, 3], [1.0, -2.0], [1.0]])
def test_simple_returns_rejects(closes):
    with pytest.raises(DataError):
        ft.simple_returns(closes)


# EWMA volatility

def ewma_vol_oracle(returns, span):
    """Textbook exponentially weighted mean/variance pair, one step at a time."""
    alpha = 2.0 / (span + 1.0)
    mean, var, out = None, None, []
    for r in returns:
        if mean is None:
            mean, var = r, r * r
        else:
            diff = r - mean
            incr = alpha * diff
            mean = mean + incr
            var = (1.0 - alpha) * (var + diff * incr)
        out.append(max(math.sqrt(var), 1e-8))
    return out


def test_ewma_vol_matches_oracle():
    r = np.random.default_rng(1).normal(0, 0.01, size=10)
    np.testing.assert_allclose(ft.ewma_vol(r, 60), ewma_vol_oracle(r.tolist(), 60), rtol=1e-12, atol=0)


def test_ewma_vol_constant_returns_decay_to_floor():
    vol = ft.ewma_vol(np.full(3000, 0.01))
    assert np.all(np.diff(vol) <= 0)
    assert vol[-1] == ft.VOL_FLOOR


def test_ewma_vol_rises_at_shock():
    r = np.full(50, 0.001)
    r[40] = 0.05
    vol = ft.ewma_vol(r)
    assert vol[40] > vol[39]


def test_ewma_vol_span_check():
    with pytest.raises(ValueError):
        ft.ewma_vol([0.1, 0.2], span=1)


# normalized returns

def test_norm_return_examples():
    assert ft.norm_return([0.02], [0.02], 1)[0] == 1.0
    out = ft.norm_return(np.zeros(30), np.full(30, 0.01), 21)
    assert np.all(out[20:] == 0.0) and np.all(np.isnan(out[:20]))


def test_norm_return_product_oracle():
    rng = np.random.default_rng(4)
    r = rng.normal(0, 0.01, size=200)
    vol = ft.ewma_vol(r)
    out = ft.norm_return(r, vol, 21)
    for t in range(20, 200):
        gross = 1.0
        for j in range(t - 20, t + 1):
            gross *= 1.0 + r[j]
        assert out[t] == pytest.approx((gross - 1.0) / (vol[t] * math.sqrt(21)), rel=1e-10)


def test_norm_return_horizon_check():
    with pytest.raises(ValueError):
        ft.norm_return([0.1] * 10, [0.1] * 10, 5)


# MACD

def macd_oracle(closes, short, long):
    def ewma(span):
        decay = 0.5 ** (1.0 / span)
        out, m = [], None
        for c in closes:
            m = c if m is None else decay * m + (1 - decay) * c
            out.append(m)
        return out

    def rolling(xs, w):
        return [statistics.stdev(xs[t - w + 1:t + 1]) if t >= w - 1 and all(
            math.isfinite(v) for v in xs[t - w + 1:t + 1]) else math.nan for t in range(len(xs))]

    m = [a - b for a, b in zip(ewma(short), ewma(long))]
    price_sd = rolling(list(closes), 63)
    q = [mi / max(sd, 1e-8) if math.isfinite(sd) else math.nan for mi, sd in zip(m, price_sd)]
    q_sd = rolling(q, 252)
    return [qi / max(sd, 1e-8) if math.isfinite(sd) else math.nan for qi, sd in zip(q, q_sd)]


@pytest.mark.parametrize("pair", ft.MACD_PAIRS)
def test_macd_matches_oracle(pair):
    closes = 100 * np.cumprod(1 + np.random.default_rng(7).normal(0, 0.01, size=400))
    got = ft.macd_signal(closes, *pair)
    want = np.array(macd_oracle(closes.tolist(), *pair))
    assert np.array_equal(np.isnan(got), np.isnan(want))
    ok = ~np.isnan(want)
    assert ok.sum() == 400 - 313
    np.testing.assert_allclose(got[ok], want[ok], rtol=1e-10, atol=1e-12)


def test_macd_constant_price_is_zero():
    sig = ft.macd_signal(np.full(400, 50.0), 8, 24)
    defined = sig[~np.isnan(sig)]
    assert len(defined) and np.all(defined == 0.0)


def test_macd_ramp_positive():
    closes = np.linspace(10, 50, 400)
    m = ft.macd_raw(closes, 16, 48)
    assert np.all(m[1:] > 0)
    sig = ft.macd_signal(closes, 16, 48)
    assert np.all(sig[~np.isnan(sig)] > 0)


def test_macd_scale_invariant():
    closes = 100 * np.cumprod(1 + np.random.default_rng(2).normal(0, 0.01, size=500))
    a = ft.macd_signal(closes, 32, 96)
    b = ft.macd_signal(closes * 37.5, 32, 96)
    ok = ~np.isnan(a)
    np.testing.assert_allclose(b[ok], a[ok], rtol=1e-9)


def test_macd_rejects_unknown_pair():
    with pytest.raises(ValueError):
        ft.macd_signal(np.ones(400), 12, 26)


# frame assembly

@pytest.fixture(scope="module")
def panel():
    return random_walk_panel(n_assets=3, start="2019-01-01", end="2021-06-30", seed=3)


@pytest.fixture(scope="module")
def frame(panel):
    return ft.build_features(panel)


def test_frame_starts_after_longest_warmup(panel, frame):
    # the 63-day price std feeding a 252-day std of q: 63 + 252 - 1 closes
    assert frame.dates[0] == panel.dates[313]
    assert frame.feature_names == ft.base_feature_names()
    assert not frame.has_cpd
    assert np.all(np.isfinite(frame.values))


def test_short_panel_gives_empty_frame():
    short = random_walk_panel(n_assets=2, start="2020-01-01", end="2021-02-01", seed=1)
    assert len(short.dates) < 314
    assert ft.build_features(short).n_dates == 0


def test_next_return_shift_oracle(panel, frame):
    offset = int(np.searchsorted(panel.dates, frame.dates[0]))
    for j in range(panel.n_assets):
        r = ft.simple_returns(panel.closes[:, j])  # r[k] is dated k + 1
        for i in range(frame.n_dates - 1):
            assert frame.next_return[i, j] == r[offset + i]
    assert np.all(np.isnan(frame.next_return[-1]))


def test_feature_truncation_is_bitwise(panel, frame):
    for cut in (frame.dates[10], frame.dates[200], frame.dates[-2]):
        short = ft.build_features(panel.truncate(cut))
        n = short.n_dates
        assert np.array_equal(short.values, frame.values[:n])
        assert np.array_equal(short.ewma_vol, frame.ewma_vol[:n])
        # only the final row's target is unknown after truncation
        assert np.array_equal(short.next_return[:-1], frame.next_return[:n - 1])


def test_floor_keeps_features_finite():
    p = momentum_panel(n_assets=2, start="2018-01-01", end="2020-01-01", seed=0)
    p.closes[:, 1] = 42.0
    f = ft.build_features(p)
    assert np.all(np.isfinite(f.values))


def _records(panel, asset_ids=None, shift_date=False):
    out = {}
    for a in asset_ids or panel.asset_ids:
        recs = []
        for t, d in enumerate(panel.dates):
            # 2019-01-05 is a Saturday, absent from the business-day calendar
            day = np.datetime64("2019-01-05") if shift_date and t == 5 else d
            recs.append(ChangepointRecord(day, t, t, 0.0, 0.5))
        out[a] = recs
    return out


def test_cpd_join(panel):
    f = ft.build_features(panel, _records(panel))
    assert f.has_cpd
    assert f.feature_names[-2:] == list(ft.CPD_COLUMNS)
    np.testing.assert_array_equal(f.column("cp_score"), 0.5)


def test_cpd_join_unknown_keys(panel):
    with pytest.raises(ft.JoinError):
        ft.build_features(panel, _records(panel, ["NOPE"]))
    with pytest.raises(ft.JoinError):
        ft.build_features(panel, _records(panel, shift_date=True))


def test_feature_csv_round_trip(tmp_path, frame):
    path = tmp_path / "f.csv"
    ft.write_feature_csv(frame, path)
    again = ft.read_feature_csv(path)
    assert again.asset_ids == frame.asset_ids and again.feature_names == frame.feature_names
    assert np.array_equal(again.dates, frame.dates)
    assert np.array_equal(again.values, frame.values)
    assert np.array_equal(again.next_return, frame.next_return, equal_nan=True)
    assert np.array_equal(again.sector_index, frame.sector_index)
