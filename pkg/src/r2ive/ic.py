"""Information criteria used to pick tuning parameters along penalized paths."""

from __future__ import annotations

import math

import numpy as np

_RSS_FLOOR = 1e-300


def use_ebic(n_columns: int, n: int) -> bool:
    """EBIC in the high-dimensional regime ``n_columns > n / 2``, BIC otherwise."""
    return n_columns > n / 2


def information_criterion(rss: float, n: int, df: float, n_candidates: int,
                          high_dim: bool, gamma_ebic: float = 0.5) -> float:
    """``n log(RSS/n) + df log n`` plus ``2 gamma df log(n_candidates)`` when ``high_dim``."""
    value = n * math.log(max(rss, _RSS_FLOOR) / n) + df * math.log(n)
    if high_dim and n_candidates > 1:
        value += 2.0 * gamma_ebic * df * math.log(n_candidates)
    return value


def argmin_first(values) -> int:
    """Index of the smallest value; ties go to the earliest (largest-lambda) entry."""
    values = np.asarray(values, dtype=float)
    return int(np.flatnonzero(values == values.min())[0])


def log_grid(lam_max: float, n_points: int = 50, ratio: float = 1e-3) -> np.ndarray:
    """Decreasing log-spaced grid from ``lam_max`` to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.zeros(1)
    return lam_max * np.logspace(0.0, math.log10(ratio), n_points)
