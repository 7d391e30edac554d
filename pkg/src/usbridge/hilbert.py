"""Hilbert projective metric on the positive cone of augmented functions.

Vectors here are "stacked" augmented functions: the grid values followed by
the coffin value as the last entry.  ``AugmentedFunction`` instances are
accepted anywhere a stacked vector is.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import AugmentedFunction


def _stack(x) -> np.ndarray:
    if isinstance(x, AugmentedFunction):
        return x.stacked()
    return np.asarray(x, dtype=float)


def hilbert_distance(x, y, support_mask=None) -> float:
    """``log(max(x/y) / min(x/y))`` over the masked coordinates.

    Returns ``inf`` when a masked coordinate of one argument vanishes while
    the other does not (a boundary point of the cone).
    """
    x = _stack(x)
    y = _stack(y)
    if x.shape != y.shape:
        raise ValueError("arguments must have the same shape")
    if support_mask is not None:
        mask = np.asarray(support_mask, dtype=bool)
        x = x[mask]
        y = y[mask]
    if x.size == 0:
        raise ValueError("empty support mask")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("Hilbert metric is only defined on the nonnegative cone")
    if np.any(x == 0) or np.any(y == 0):
        if np.array_equal(x == 0, y == 0) and not np.all(x == 0):
            nz = x != 0
            x, y = x[nz], y[nz]
        else:
            return float("inf")
    # log-domain keeps very wide dynamic ranges finite
    lr = np.log(x) - np.log(y)
    return float(lr.max() - lr.min())


def birkhoff_ratio(diameter: float) -> float:
    """Contraction ratio ``tanh(diameter / 4)`` of a positive linear map."""
    if diameter < 0:
        raise ValueError("projective diameter must be >= 0")
    if np.isinf(diameter):
        return 1.0
    return float(np.tanh(diameter / 4.0))


def diameter_bound(images) -> float:
    """Twice the largest distance from the all-ones vector over ``images``.

    Only an empirical estimate of the projective diameter's upper bound: the
    true bound needs a supremum over the whole cone.
    """
    images = [_stack(v) for v in images]
    if not images:
        raise ValueError("need at least one image")
    return 2.0 * max(hilbert_distance(v, np.ones_like(v)) for v in images)


@dataclass
class HilbertReport:
    distances: list[float] = field(default_factory=list)
    birkhoff_bound: float | None = None

    @property
    def ratios(self) -> np.ndarray:
        d = np.asarray(self.distances, dtype=float)
        if d.size < 2:
            return np.empty(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]

    def fitted_ratio(self, floor: float = 1e-12) -> float:
        """Geometric decay rate from a log-linear fit over distances above ``floor``."""
        d = np.asarray(self.distances, dtype=float)
        d = d[(d > floor) & np.isfinite(d)]
        if d.size < 3:
            return 0.0
        k = np.arange(d.size)
        slope = np.polyfit(k, np.log(d), 1)[0]
        return float(np.exp(slope))
