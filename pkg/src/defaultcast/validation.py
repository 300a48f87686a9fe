"""Input validation helpers shared across the package."""
from __future__ import annotations

import numpy as np

__all__ = [
    "check_alpha",
    "check_level",
    "check_probabilities",
    "check_finite",
    "as_generator",
    "carry_forward",
]


def check_alpha(alpha: float) -> float:
    """Validate a miscoverage rate, returning it as a float in (0, 1)."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    return alpha


def check_level(level: float) -> float:
    """Validate a coverage level, returning it as a float in (0, 1)."""
    level = float(level)
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie strictly inside (0, 1), got {level}")
    return level


def check_probabilities(p, name: str = "p") -> np.ndarray:
    """Coerce to a 1-d float array and require every entry in [0, 1]."""
    arr = np.asarray(p, dtype=float).ravel()
    if arr.size and (np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must contain probabilities in [0, 1]")
    return arr


def check_finite(arr, name: str = "array") -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} must be finite")
    return arr


def as_generator(seed) -> np.random.Generator:
    """Accept a Generator, an int seed, or a tag tuple and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    from ._rng import substream

    return substream(seed)


def carry_forward(values: np.ndarray, limit: int | None = None):
    """Forward-fill NaNs column-wise along axis 0.

    Returns ``(filled, age)`` where ``age[t, j]`` counts months since the value
    in ``filled[t, j]`` was actually observed (0 at observation months, and -1
    where nothing has been observed yet, in which case ``filled`` stays NaN).
    With ``limit`` set, cells staler than ``limit`` months revert to NaN.
    """
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    t = values.shape[0]
    observed = ~np.isnan(values)
    idx = np.where(observed, np.arange(t)[:, None], -1)
    idx = np.maximum.accumulate(idx, axis=0)
    filled = np.where(idx >= 0, values[idx, np.arange(values.shape[1])[None, :]], np.nan)
    age = np.where(idx >= 0, np.arange(t)[:, None] - idx, -1)
    if limit is not None:
        stale = age > limit
        filled = np.where(stale, np.nan, filled)
        age = np.where(stale, -1, age)
    if squeeze:
        return filled[:, 0], age[:, 0]
    return filled, age
