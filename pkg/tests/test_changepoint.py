import math

import numpy as np
import pytest

from momentum_tft import changepoint as cp
from momentum_tft.synthetic import random_walk_panel

WHITE_NOISE = {"signal_var": 1e-4, "lengthscale": 1.0, "noise_var": 1.0}


def dense_nlml(y, kind, hp):
    """Direct formula: explicit kernel matrix, inverse and log-determinant."""
    n = len(y)
    x = np.arange(n, dtype=float)
    d = np.abs(x[:, None] - x[None, :])

    def matern(var, ls):
        r = math.sqrt(3.0) * d / ls
        return var * (1 + r) * np.exp(-r)

    if kind == cp.MATERN32:
        K = matern(hp["signal_var"], hp["lengthscale"])
    else:
        s = 1.0 / (1.0 + np.exp(-hp["steepness"] * (x - hp["location"])))
        K = (np.outer(s, s) * matern(hp["signal_var_1"], hp["lengthscale_1"])
             + np.outer(1 - s, 1 - s) * matern(hp["signal_var_2"], hp["lengthscale_2"]))
    C = K + hp["noise_var"] * np.eye(n)
    _, logdet = np.linalg.slogdet(C)
    return 0.5 * y @ np.linalg.inv(C) @ y + 0.5 * logdet + 0.5 * n * math.log(2 * math.pi)


def test_single_point_closed_form():
    hp = {"signal_var": 0.6, "lengthscale": 2.0, "noise_var": 0.4}
    assert cp.gp_nlml([0.0], cp.MATERN32, hp) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_nlml_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=21)
    plain = {"signal_var": rng.uniform(0.1, 2), "lengthscale": rng.uniform(1, 10),
             "noise_var": rng.uniform(0.05, 1)}
    assert cp.gp_nlml(y, cp.MATERN32, plain) == pytest.approx(dense_nlml(y, cp.MATERN32, plain), abs=1e-8)
    change = {"signal_var_1": 1.3, "lengthscale_1": 3.0, "signal_var_2": 0.4, "lengthscale_2": 7.0,
              "noise_var": 0.2, "location": rng.uniform(0, 20), "steepness": rng.uniform(0.1, 5)}
    assert cp.gp_nlml(y, cp.CHANGEPOINT, change) == pytest.approx(dense_nlml(y, cp.CHANGEPOINT, change),
                                                                  abs=1e-8)


def test_flat_switch_degenerates_to_plain():
    # with steepness -> 0 the switch is 1/2 everywhere, so each regime carries
    # a quarter of its variance and two regimes at 2v reproduce one at v
    y = np.random.default_rng(1).normal(size=21)
    plain = {"signal_var": 0.8, "lengthscale": 4.0, "noise_var": 0.3}
    change = {"signal_var_1": 1.6, "lengthscale_1": 4.0, "signal_var_2": 1.6, "lengthscale_2": 4.0,
              "noise_var": 0.3, "location": 10.0, "steepness": 1e-9}
    assert cp.gp_nlml(y, cp.CHANGEPOINT, change) == pytest.approx(cp.gp_nlml(y, cp.MATERN32, plain), abs=1e-6)


def test_jitter_then_singular_error():
    y = np.zeros(21)
    # near-zero noise with a long lengthscale: needs jitter but factorizes
    nearly = {"signal_var": 1.0, "lengthscale": 1e4, "noise_var": 0.0}
    assert np.isfinite(cp.gp_nlml(y, cp.MATERN32, nearly))
    with pytest.raises(cp.SingularKernelError):
        cp.gp_nlml(y, cp.MATERN32, {"signal_var": 1.0, "lengthscale": 1.0, "noise_var": -1.0})


def test_white_noise_fits_have_low_signal_to_noise():
    low = 0
    for seed in range(50):
        y = cp.standardize(np.random.default_rng(seed).normal(size=21))
        hp = cp.fit_gp(y, cp.MATERN32, seed=seed).hyperparams
        low += hp["signal_var"] / hp["noise_var"] < 1.0
    assert low >= 40


def test_sine_fit_beats_white_noise_model():
    y = cp.standardize(np.sin(2 * np.pi * np.arange(21) / 6))
    fit = cp.fit_gp(y, cp.MATERN32, seed=0)
    assert math.isfinite(fit.hyperparams["lengthscale"])
    assert fit.nlml < cp.gp_nlml(y, cp.MATERN32, WHITE_NOISE)


def test_fit_is_deterministic_and_positive():
    y = cp.standardize(np.random.default_rng(3).normal(size=21))
    a = cp.fit_gp(y, cp.CHANGEPOINT, seed=11)
    b = cp.fit_gp(y, cp.CHANGEPOINT, seed=11)
    assert a == b
    for name, value in a.hyperparams.items():
        if name != "location":
            assert value > 0


def test_changepoint_fit_never_worse_than_plain():
    for seed in range(10):
        y = cp.standardize(np.random.default_rng(seed).normal(size=21))
        plain = cp.fit_gp(y, cp.MATERN32, seed=seed)
        change = cp.fit_gp(y, cp.CHANGEPOINT, seed=seed, extra_starts=cp._degenerate_start(plain, 21))
        assert change.nlml <= plain.nlml + 1e-6


def shifted_window(seed, size=21, at=10, shift=5.0):
    w = np.random.default_rng(seed).normal(size=size)
    w[at:] += shift
    return w


def test_planted_shift_location():
    hits = 0
    for seed in range(20):
        rec = cp.detect_changepoint(shifted_window(seed), 21, "2021-03-01", 100, seed=seed)
        hits += abs(rec.cp_location - (100 - 20 + 10)) <= 2
    assert hits >= 18


def test_shift_scores_above_noise_scores():
    rng = np.random.default_rng(0)
    shifted = [cp.detect_changepoint(shifted_window(s), 21, "2021-03-01", 50, seed=s).cp_score
               for s in range(15)]
    noise = [cp.detect_changepoint(rng.normal(size=21), 21, "2021-03-01", 50, seed=s).cp_score
             for s in range(15)]
    assert np.median(shifted) > np.median(noise)


def test_constant_window():
    rec = cp.detect_changepoint(np.full(21, 0.003), 21, "2021-03-01", 42)
    assert (rec.cp_score, rec.cp_location, rec.cp_location_norm) == (0.0, 42, 0.0)


def test_translation_invariance():
    w = shifted_window(4)
    a = cp.detect_changepoint(w, 21, "2021-03-01", 30, seed=1)
    b = cp.detect_changepoint(w + 0.25, 21, "2021-03-01", 30, seed=1)
    assert a.cp_location == b.cp_location


def test_window_validation():
    with pytest.raises(ValueError):
        cp.detect_changepoint(np.zeros(4), 4, "2021-03-01", 4)
    with pytest.raises(ValueError):
        cp.detect_changepoint(np.zeros(20), 21, "2021-03-01", 30)


def test_score_formula():
    assert cp.changepoint_score(10.0, 10.0) == 0.0
    assert cp.changepoint_score(12.0, 10.0) == 0.0
    assert cp.changepoint_score(5.0, 10.0) == 0.5
    # negative likelihoods: the ratio is clamped back into [0, 1]
    assert 0.0 <= cp.changepoint_score(-3.0, 2.0) <= 1.0


@pytest.fixture(scope="module")
def small_panel():
    return random_walk_panel(n_assets=2, start="2021-01-01", end="2021-05-20", seed=5)


@pytest.fixture(scope="module")
def records(small_panel):
    return cp.run_cpd(small_panel, 21, seed=3, threads=1)


def test_run_cpd_counts(small_panel, records):
    assert small_panel.n_dates == 100
    # a 21-return window first exists on the 22nd date
    assert {k: len(v) for k, v in records.items()} == {"A00": 79, "A01": 79}
    assert records["A00"][0].date == small_panel.dates[21]


def test_record_invariants(records):
    for recs in records.values():
        for r in recs:
            assert 0.0 <= r.cp_score <= 1.0
            assert 0.0 <= r.cp_location_norm <= 1.0
            assert r.t - 21 + 1 <= r.cp_location <= r.t
            assert r.cp_location_norm == (r.t - r.cp_location) / 21


def test_threads_do_not_change_output(small_panel, records):
    assert cp.run_cpd(small_panel, 21, seed=3, threads=3) == records


def test_lookback_flag(small_panel):
    with pytest.raises(ValueError):
        cp.run_cpd(small_panel, 30)


def test_csv_round_trip(tmp_path, records):
    path = tmp_path / "A00.csv"
    cp.write_cpd_csv(records["A00"], path)
    assert path.read_text().splitlines()[0] == "date,t,cp_location,cp_location_norm,cp_score"
    assert cp.read_cpd_csv(path) == records["A00"]
