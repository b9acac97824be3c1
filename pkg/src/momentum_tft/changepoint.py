"""Gaussian-process changepoint scoring over trailing return windows.

Each window is standardized and fitted twice: once with a Matérn-3/2 kernel
and once with a changepoint kernel that switches between two Matérn-3/2
kernels through a sigmoid at location ``x0`` with steepness ``s``.  The
likelihood improvement of the second fit gives ``cp_score``; its fitted
``x0`` gives the location.

The inner loops (kernel build, Cholesky, Nelder-Mead) are compiled with
numba and release the GIL, so assets can be processed on a thread pool.
"""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .features import simple_returns
from .market_data import PricePanel

DEFAULT_LOOKBACK = 21
SUPPORTED_LOOKBACKS = (21, 126)
N_STARTS = 8
STD_FLOOR = 1e-8
JITTER_LADDER = (1e-8, 1e-6, 1e-4)
NM_FATOL = 1e-6

MATERN32 = "matern32"
CHANGEPOINT = "changepoint"
_KIND_CODE = {MATERN32: 0, CHANGEPOINT: 1}
PARAM_NAMES = {
    MATERN32: ("signal_var", "lengthscale", "noise_var"),
    CHANGEPOINT: ("signal_var_1", "lengthscale_1", "signal_var_2", "lengthscale_2",
                  "noise_var", "location", "steepness"),
}
_LOG2PI = math.log(2.0 * math.pi)
_SQRT3 = math.sqrt(3.0)


class SingularKernelError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GPFit:
    kernel_kind: str
    hyperparams: dict
    nlml: float


@dataclass(frozen=True)
class ChangepointRecord:
    date: np.datetime64
    t: int
    cp_location: int
    cp_location_norm: float
    cp_score: float


# compiled core

@numba.njit(cache=True, nogil=True)
def _matern_into(K, lag, n, var, ls, scale, accumulate):
    # positions are 0..n-1, so the kernel only depends on the lag
    for d in range(n):
        r = d * _SQRT3 / ls
        lag[d] = var * (1.0 + r) * math.exp(-r)
    for i in range(n):
        for j in range(i + 1):
            k = scale[i] * scale[j] * lag[i - j]
            if accumulate:
                K[i, j] += k
            else:
                K[i, j] = k


@numba.njit(cache=True, nogil=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@numba.njit(cache=True, nogil=True)
def _kernel_into(K, work, x, kind, p):
    """Lower triangle of the signal covariance (no noise) for natural-space params ``p``."""
    n = x.shape[0]
    lag, sig, comp = work[0], work[1], work[2]
    if kind == 0:
        for i in range(n):
            sig[i] = 1.0
        _matern_into(K, lag, n, p[0], p[1], sig, False)
    else:
        for i in range(n):
            sig[i] = _sigmoid(p[6] * (x[i] - p[5]))
            comp[i] = 1.0 - sig[i]
        # regime 1 after the switch, regime 2 before it
        _matern_into(K, lag, n, p[0], p[1], sig, False)
        _matern_into(K, lag, n, p[2], p[3], comp, True)


@numba.njit(cache=True, nogil=True)
def _kernel(x, kind, p):
    n = x.shape[0]
    K = np.zeros((n, n))
    _kernel_into(K, np.empty((3, n)), x, kind, p)
    for i in range(n):
        for j in range(i):
            K[j, i] = K[i, j]
    return K


@numba.njit(cache=True, nogil=True)
def _cholesky_lower(K, diag, L):
    """Factor the matrix whose lower triangle is ``K`` plus ``diag`` on the diagonal."""
    n = K.shape[0]
    for j in range(n):
        s = K[j, j] + diag
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > 0.0):
            return False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = K[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    return True


@numba.njit(cache=True, nogil=True)
def _nlml_ws(y, x, kind, p, jitters, K, L, work):
    """Returns (nlml, ok).  Tries no jitter first, then the ladder."""
    n = y.shape[0]
    _kernel_into(K, work, x, kind, p)
    noise = p[2] if kind == 0 else p[4]
    a = work[3]
    for attempt in range(jitters.shape[0] + 1):
        extra = 0.0 if attempt == 0 else jitters[attempt - 1]
        if _cholesky_lower(K, noise + extra, L):
            # alpha = L^-1 y
            quad = 0.0
            logdet = 0.0
            for i in range(n):
                s = y[i]
                for k in range(i):
                    s -= L[i, k] * a[k]
                a[i] = s / L[i, i]
                quad += a[i] * a[i]
                logdet += math.log(L[i, i])
            return 0.5 * quad + logdet + 0.5 * n * _LOG2PI, True
    return np.inf, False


@numba.njit(cache=True, nogil=True)
def _nlml(y, x, kind, p, jitters):
    n = y.shape[0]
    return _nlml_ws(y, x, kind, p, jitters, np.empty((n, n)), np.empty((n, n)), np.empty((4, n)))


@numba.njit(cache=True, nogil=True)
def _to_natural(kind, z, lo, hi):
    m = z.shape[0]
    p = np.empty(m)
    for i in range(m):
        zi = min(max(z[i], lo[i]), hi[i])
        if kind == 1 and i == 5:
            p[i] = zi
        else:
            p[i] = math.exp(zi)
    return p


@numba.njit(cache=True, nogil=True)
def _objective(y, x, kind, z, lo, hi, jitters, K, L, work):
    f, ok = _nlml_ws(y, x, kind, _to_natural(kind, z, lo, hi), jitters, K, L, work)
    if not ok:
        return 1e300
    return f


@numba.njit(cache=True, nogil=True)
def _nelder_mead(y, x, kind, z0, step, lo, hi, jitters, max_iter, fatol):
    m = z0.shape[0]
    n = y.shape[0]
    K = np.empty((n, n))
    L = np.empty((n, n))
    work = np.empty((4, n))
    simplex = np.empty((m + 1, m))
    fvals = np.empty(m + 1)
    for i in range(m + 1):
        for j in range(m):
            simplex[i, j] = z0[j]
        if i > 0:
            simplex[i, i - 1] += step[i - 1]
        fvals[i] = _objective(y, x, kind, simplex[i], lo, hi, jitters, K, L, work)
    centroid = np.empty(m)
    xr = np.empty(m)
    xe = np.empty(m)
    xc = np.empty(m)
    for it in range(max_iter):
        order = np.argsort(fvals)
        simplex = simplex[order]
        fvals = fvals[order]
        if fvals[m] - fvals[0] < fatol:
            break
        for j in range(m):
            c = 0.0
            for i in range(m):
                c += simplex[i, j]
            centroid[j] = c / m
        for j in range(m):
            xr[j] = centroid[j] + (centroid[j] - simplex[m, j])
        fr = _objective(y, x, kind, xr, lo, hi, jitters, K, L, work)
        if fr < fvals[0]:
            for j in range(m):
                xe[j] = centroid[j] + 2.0 * (xr[j] - centroid[j])
            fe = _objective(y, x, kind, xe, lo, hi, jitters, K, L, work)
            if fe < fr:
                simplex[m, :] = xe
                fvals[m] = fe
            else:
                simplex[m, :] = xr
                fvals[m] = fr
        elif fr < fvals[m - 1]:
            simplex[m, :] = xr
            fvals[m] = fr
        else:
            if fr < fvals[m]:
                for j in range(m):
                    xc[j] = centroid[j] + 0.5 * (xr[j] - centroid[j])
            else:
                for j in range(m):
                    xc[j] = centroid[j] + 0.5 * (simplex[m, j] - centroid[j])
            fc = _objective(y, x, kind, xc, lo, hi, jitters, K, L, work)
            if fc < min(fr, fvals[m]):
                simplex[m, :] = xc
                fvals[m] = fc
            else:
                for i in range(1, m + 1):
                    for j in range(m):
                        simplex[i, j] = simplex[0, j] + 0.5 * (simplex[i, j] - simplex[0, j])
                    fvals[i] = _objective(y, x, kind, simplex[i], lo, hi, jitters, K, L, work)
    best = np.argmin(fvals)
    out = np.empty(m)
    for j in range(m):
        out[j] = min(max(simplex[best, j], lo[j]), hi[j])
    return out, fvals[best]


@numba.njit(cache=True, nogil=True)
def _multistart(y, x, kind, starts, step, lo, hi, jitters, max_iter, fatol):
    best_f = np.inf
    best_z = starts[0].copy()
    for s in range(starts.shape[0]):
        z, f = _nelder_mead(y, x, kind, starts[s], step, lo, hi, jitters, max_iter, fatol)
        if f < best_f:
            best_f = f
            best_z = z
    return best_z, best_f


# search space

def _bounds(kind: str, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower/upper bounds and initial simplex steps in search space."""
    var = (math.log(1e-4), math.log(20.0))
    ls = (math.log(1.0), math.log(10.0 * n))
    if kind == MATERN32:
        lo, hi = zip(var, ls, var)
        step = (1.0, 0.7, 1.0)
    else:
        loc = (-float(n), 2.0 * n)
        steep = (math.log(1e-3), math.log(50.0))
        lo, hi = zip(var, ls, var, ls, var, loc, steep)
        step = (1.0, 0.7, 1.0, 0.7, 1.0, 2.0, 1.0)
    return np.array(lo), np.array(hi), np.array(step)


def _random_starts(kind: str, n: int, rng: np.random.Generator, count: int) -> np.ndarray:
    u = rng.random((count, len(PARAM_NAMES[kind])))
    var = lambda v: math.log(0.1) + v * (math.log(2.0) - math.log(0.1))
    noise = lambda v: math.log(0.05) + v * (math.log(1.0) - math.log(0.05))
    ls = lambda v: v * math.log(n)
    starts = np.empty_like(u)
    for k in range(count):
        if kind == MATERN32:
            starts[k] = (var(u[k, 0]), ls(u[k, 1]), noise(u[k, 2]))
        else:
            # locations stratified across the window so every region gets a start
            x0 = (k + u[k, 5]) * (n - 1) / count
            steep = math.log(0.5) + u[k, 6] * (math.log(5.0) - math.log(0.5))
            starts[k] = (var(u[k, 0]), ls(u[k, 1]), var(u[k, 2]), ls(u[k, 3]), noise(u[k, 4]), x0, steep)
    return starts


def _natural(kind: str, z: np.ndarray) -> dict:
    vals = [float(v) if (kind == CHANGEPOINT and i == 5) else math.exp(v) for i, v in enumerate(z)]
    return dict(zip(PARAM_NAMES[kind], vals))


def _param_vector(kind: str, hyperparams) -> np.ndarray:
    if isinstance(hyperparams, dict):
        return np.array([float(hyperparams[k]) for k in PARAM_NAMES[kind]])
    return np.asarray(hyperparams, dtype=np.float64)


def standardize(window) -> np.ndarray | None:
    """Zero-mean, unit-std copy of ``window``; None when it is constant."""
    y = np.asarray(window, dtype=np.float64)
    sd = float(np.std(y))
    if sd < STD_FLOOR:
        return None
    return (y - np.mean(y)) / sd


def gp_nlml(window, kernel_kind: str, hyperparams) -> float:
    """Negative log marginal likelihood of ``window`` on positions 0..n-1."""
    if kernel_kind not in _KIND_CODE:
        raise ValueError(f"unknown kernel {kernel_kind!r}")
    y = np.asarray(window, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    p = _param_vector(kernel_kind, hyperparams)
    f, ok = _nlml(y, x, _KIND_CODE[kernel_kind], p, np.array(JITTER_LADDER))
    if not ok:
        raise SingularKernelError(f"{kernel_kind} kernel not positive definite after jitter {JITTER_LADDER[-1]}")
    return float(f)


def fit_gp(window, kernel_kind: str, seed=0, extra_starts=None, max_iter: int = 400) -> GPFit:
    """Multi-start Nelder-Mead minimization of the NLML in log-parameter space.

    ``window`` is used as given; callers standardize first.
    """
    y = np.asarray(window, dtype=np.float64)
    n = len(y)
    x = np.arange(n, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_random = N_STARTS - (0 if extra_starts is None else len(extra_starts))
    starts = _random_starts(kernel_kind, n, rng, max(n_random, 1))
    if extra_starts is not None:
        starts = np.vstack([np.asarray(extra_starts, dtype=np.float64), starts])
    lo, hi, step = _bounds(kernel_kind, n)
    z, f = _multistart(y, x, _KIND_CODE[kernel_kind], starts, step, lo, hi,
                       np.array(JITTER_LADDER), max_iter, NM_FATOL)
    if not np.isfinite(f) or f >= 1e299:
        raise SingularKernelError(f"every {kernel_kind} start failed to factorize")
    return GPFit(kernel_kind, _natural(kernel_kind, z), float(f))


def _degenerate_start(plain: GPFit, n: int) -> np.ndarray:
    """Changepoint-kernel point that reproduces the plain fit exactly: both
    regimes carry the plain kernel and the switch sits far before the window,
    so the sigmoid is exactly 1 on every position."""
    hp = plain.hyperparams
    z = [math.log(hp["signal_var"]), math.log(hp["lengthscale"]),
         math.log(hp["signal_var"]), math.log(hp["lengthscale"]),
         math.log(hp["noise_var"]), -float(n), math.log(50.0)]
    return np.array([z])


def changepoint_score(nlml_cp: float, nlml_plain: float) -> float:
    denom = max(nlml_cp, nlml_plain)
    if denom == 0.0:
        return 0.0
    return float(min(max(1.0 - nlml_cp / denom, 0.0), 1.0))


def detect_changepoint(window, lookback: int, date, t: int, seed=0) -> ChangepointRecord:
    y = np.asarray(window, dtype=np.float64)
    if lookback < 5 or len(y) != lookback:
        raise ValueError(f"window length {len(y)} must equal lookback {lookback} >= 5")
    z = standardize(y)
    if z is None:
        return ChangepointRecord(np.datetime64(date, "D"), int(t), int(t), 0.0, 0.0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    plain = fit_gp(z, MATERN32, rng)
    cp = fit_gp(z, CHANGEPOINT, rng, extra_starts=_degenerate_start(plain, lookback))
    x0 = cp.hyperparams["location"]
    local = int(min(max(round(x0), 0), lookback - 1))
    location = int(t) - (lookback - 1) + local
    return ChangepointRecord(np.datetime64(date, "D"), int(t), location,
                             (int(t) - location) / lookback,
                             changepoint_score(cp.nlml, plain.nlml))


def task_seed(global_seed: int, asset_id: str, t: int) -> np.random.Generator:
    """Generator keyed on (seed, asset, t) so scheduling order is irrelevant."""
    key = zlib.crc32(asset_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), key, int(t)]))


def cpd_series(closes, dates, asset_id: str, lookback: int = DEFAULT_LOOKBACK,
               seed: int = 0) -> list[ChangepointRecord]:
    """Records for every date whose trailing ``lookback`` daily returns exist."""
    r = simple_returns(closes)
    out = []
    # r[k] is the return dated at index k + 1
    for t in range(lookback, len(closes)):
        window = r[t - lookback:t]
        out.append(detect_changepoint(window, lookback, dates[t], t, task_seed(seed, asset_id, t)))
    return out


def run_cpd(panel: PricePanel, lookback: int = DEFAULT_LOOKBACK, seed: int = 0,
            threads: int = 1) -> dict[str, list[ChangepointRecord]]:
    if lookback not in SUPPORTED_LOOKBACKS:
        raise ValueError(f"lookback must be one of {SUPPORTED_LOOKBACKS}")
    ids = panel.asset_ids

    def one(j):
        return cpd_series(panel.closes[:, j], panel.dates, ids[j], lookback, seed)

    if threads <= 1:
        results = [one(j) for j in range(len(ids))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(ids))))
    return dict(zip(ids, results))


CPD_HEADER = ("date", "t", "cp_location", "cp_location_norm", "cp_score")


def write_cpd_csv(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CPD_HEADER)
        for r in records:
            w.writerow([str(r.date), r.t, r.cp_location, repr(float(r.cp_location_norm)), repr(float(r.cp_score))])


def read_cpd_csv(path) -> list[ChangepointRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CPD_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CPD_HEADER)}")
        return [ChangepointRecord(np.datetime64(d, "D"), int(t), int(loc), float(norm), float(score))
                for d, t, loc, norm, score in reader]
