"""Define some useful math functions."""

from typing import Iterable, Sequence, Tuple

import numpy as np

# Row sums and degenerate checks share one tolerance.
SIMPLEX_TOLERANCE = 1e-9


def clamp(value, min_bound, max_bound, less=lambda x, y: x < y):
    """Clamp a value between an upper and lower bound."""
    if less(value, min_bound):
        return min_bound
    if less(max_bound, value):
        return max_bound
    return value


def lower_quantile(values: np.ndarray, q: float) -> float:
    """Lower nearest-rank quantile of the non-missing values (no interpolation)."""
    finite = values[~np.isnan(values)]
    return float(np.quantile(finite, q, method="lower"))


def rank_weights(weights: Iterable[Tuple[str, float]]) -> Sequence[Tuple[str, float]]:
    """Order (id, weight) pairs by weight descending, then id ascending."""
    return sorted(weights, key=lambda pair: (-pair[1], pair[0]))


def renormalize(weights: Sequence[Tuple[str, float]]) -> Sequence[Tuple[str, float]]:
    """Scale weights so they sum to one."""
    total = sum(weight for _, weight in weights)
    return [(key, weight / total) for key, weight in weights]


def sample_sd(values: Sequence[float]) -> float:
    """Sample standard deviation, 0 for fewer than two values."""
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values, dtype=float), ddof=1))
