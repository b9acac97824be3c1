"""Momentum trading with a decoder-only temporal fusion transformer.

Submodules are imported on demand (``from momentum_tft import training``)
so that ``python -m momentum_tft`` can pin BLAS threading before numpy
loads.
"""

from pathlib import Path

__version__ = "0.1.0"

FIXTURE_PRICES = Path(__file__).with_name("data") / "fixture_prices.csv"
