"""Seeded synthetic price panels for tests and demos."""

from __future__ import annotations

import numpy as np

from .market_data import SECTORS, AssetMeta, PricePanel


def business_days(start: str, end: str) -> np.ndarray:
    days = np.arange(np.datetime64(start, "D"), np.datetime64(end, "D") + 1)
    return days[np.is_busday(days)]


def ar1_returns(n: int, phi: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """r_t = phi * r_{t-1} + e_t with stationary start."""
    e = rng.normal(0.0, sigma, size=n)
    r = np.empty(n)
    r[0] = e[0] / np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        r[t] = phi * r[t - 1] + e[t]
    return r


def momentum_panel(n_assets: int = 10, start: str = "2016-09-01", end: str = "2023-12-31",
                   phi: float = 0.3, sigma: float = 0.01, drift: float = 0.0,
                   seed: int = 0) -> PricePanel:
    """Panel whose daily returns follow a sign-persistent AR(1) process.

    The default calendar leaves roughly one year of price history ahead of
    2018 for feature warm-up, so features cover six full years.
    """
    rng = np.random.default_rng(seed)
    dates = business_days(start, end)
    closes = np.empty((len(dates), n_assets))
    assets = []
    for j in range(n_assets):
        vol = sigma * rng.uniform(0.7, 1.4)
        r = ar1_returns(len(dates) - 1, phi, vol, rng) + drift
        closes[:, j] = 100.0 * np.concatenate([[1.0], np.cumprod(1.0 + r)])
        sector = SECTORS[j % len(SECTORS)]
        assets.append(AssetMeta(f"A{j:02d}", f"SYN{j:02d}", sector))
    return PricePanel(dates, assets, closes)


def random_walk_panel(n_assets: int = 3, start: str = "2016-01-01", end: str = "2023-12-31",
                      sigma: float = 0.012, seed: int = 0) -> PricePanel:
    return momentum_panel(n_assets, start, end, phi=0.0, sigma=sigma, drift=0.0003, seed=seed)
