"""Synthetic price tables for tests and demos.

n_steps counts return steps; generated tables carry n_steps + 1 price
columns. Dates are zero-padded counters and asset ids run A000, A001, ...
"""

from __future__ import annotations

import numpy as np

from . import metrics
from .market_data import PriceTable


def _table(prices: np.ndarray) -> PriceTable:
    n, cols = prices.shape
    asset_ids = tuple(f"A{i:03d}" for i in range(n))
    dates = tuple(f"{t:05d}" for t in range(cols))
    return PriceTable(asset_ids, dates, prices, dropped=())


def random_walk_table(
    n_assets: int,
    n_steps: int,
    seed: int,
    mu: float = 0.0005,
    sigma: float = 0.02,
) -> PriceTable:
    """Independent lognormal walks starting at 100."""
    rng = np.random.default_rng(seed)
    gross = np.exp(rng.normal(mu, sigma, size=(n_assets, n_steps)))
    prices = 100.0 * np.concatenate(
        [np.ones((n_assets, 1)), np.cumprod(gross, axis=1)], axis=1
    )
    return _table(prices)


def dominant_asset_table(
    n_assets: int, n_steps: int, seed: int, edge: float = 0.01
) -> PriceTable:
    """Asset 0 compounds a fixed positive edge every step; the rest are
    driftless noise. Any trailing-return ranking puts asset 0 on top."""
    rng = np.random.default_rng(seed)
    gross = np.exp(rng.normal(0.0, 0.005, size=(n_assets, n_steps)))
    gross[0, :] = 1.0 + edge
    prices = 100.0 * np.concatenate(
        [np.ones((n_assets, 1)), np.cumprod(gross, axis=1)], axis=1
    )
    return _table(prices)


def planted_momentum_table(
    n_assets: int = 40,
    n_steps: int = 800,
    seed: int = 7,
    signal: float = 0.30,
    window: int = 7,
    mu: float = 0.0002,
    sigma: float = 0.02,
) -> PriceTable:
    """Walks whose next-step return rank follows trailing momentum, noisily.

    Each step's return shock is signal * standardized momentum rank plus
    sqrt(1 - signal^2) * independent noise, so the planted factor's RankIC
    is tunable via `signal` (the default lands the oracle near 0.3).
    """
    if not 0.0 <= signal < 1.0:
        raise ValueError("signal must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    prices = np.empty((n_assets, n_steps + 1), dtype=np.float64)
    prices[:, 0] = 100.0
    noise_scale = float(np.sqrt(1.0 - signal * signal))
    for t in range(n_steps):
        shock = rng.standard_normal(n_assets)
        if t >= window:
            momentum = prices[:, t] / prices[:, t - window] - 1.0
            ranks = np.argsort(np.argsort(momentum)).astype(np.float64)
            ranks = (ranks - ranks.mean()) / ranks.std()
            z = signal * ranks + noise_scale * shock
        else:
            z = shock
        prices[:, t + 1] = prices[:, t] * np.exp(mu + sigma * z)
    return _table(prices)


def momentum_rankic_oracle(table: PriceTable, window: int = 7, start: int = 30) -> float:
    """Mean RankIC of raw price momentum, computed straight off the table.

    Independent of the expression evaluator: momentum is P_t / P_{t-w} - 1
    from the stored prices, correlated against the next step's return.
    """
    prices = table.prices
    n_cols = prices.shape[1]
    ics = []
    for t in range(max(start, window), n_cols - 1):
        momentum = prices[:, t] / prices[:, t - window] - 1.0
        realized = prices[:, t + 1] / prices[:, t]
        ics.append(metrics.spearman_rank_corr(momentum, realized).value)
    if not ics:
        raise ValueError("table too short for the oracle window")
    return float(np.mean(ics))
