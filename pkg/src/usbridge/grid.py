"""Space/time discretization and measures on the augmented state space.

Densities live on a cell-centred grid and are stored per unit length, so
every mass is an ``h``-weighted sum.  The coffin (absorbing) state is carried
as one extra scalar next to the spatial vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class SpaceGrid:
    domain_lo: float
    domain_hi: float
    n_cells: int

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 3:
            raise ValueError(f"n_cells must be an integer >= 3, got {self.n_cells}")
        if not self.domain_hi > self.domain_lo:
            raise ValueError("domain_hi must exceed domain_lo")

    @property
    def h(self) -> float:
        return (self.domain_hi - self.domain_lo) / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        """Cell centres."""
        return self.domain_lo + (np.arange(self.n_cells) + 0.5) * self.h


@dataclass(frozen=True)
class TimeMesh:
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = 1.0
        return t


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AugmentedMeasure:
    """Mass density on the grid plus the mass sitting in the coffin state."""

    density: np.ndarray
    coffin: float = 0.0
    grid: SpaceGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "density", _frozen(self.density))
        if self.density.ndim != 1:
            raise ValueError("density must be one-dimensional")
        if self.grid is not None and self.density.size != self.grid.n_cells:
            raise ValueError("density length does not match grid")
        if np.any(self.density < 0) or self.coffin < 0:
            raise ValueError("measure entries must be nonnegative")
        if not (np.all(np.isfinite(self.density)) and np.isfinite(self.coffin)):
            raise ValueError("measure entries must be finite")


@dataclass(frozen=True)
class AugmentedFunction:
    """A function on grid cells plus its value at the coffin state."""

    values: np.ndarray
    coffin_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if not (np.all(np.isfinite(self.values)) and np.isfinite(self.coffin_value)):
            raise ValueError("augmented function entries must be finite")

    def stacked(self) -> np.ndarray:
        return np.append(self.values, self.coffin_value)

    @classmethod
    def from_stacked(cls, v) -> "AugmentedFunction":
        v = np.asarray(v, dtype=float)
        return cls(v[:-1], float(v[-1]))


def total_mass(p: AugmentedMeasure, h: float | None = None) -> float:
    """Midpoint-rule mass ``h * sum(density) + coffin``."""
    if h is None:
        if p.grid is None:
            raise ValueError("cell width unknown: pass h or attach a grid")
        h = p.grid.h
    return float(h * np.sum(p.density) + p.coffin)


def sample_density(f: Callable[[np.ndarray], np.ndarray], grid: SpaceGrid,
                   total: float | None = None) -> np.ndarray:
    """Evaluate ``f`` at cell centres, optionally rescaled to a prescribed mass."""
    vals = np.asarray(f(grid.nodes), dtype=float)
    if vals.shape != (grid.n_cells,):
        raise ValueError("density function must return one value per cell")
    if np.any(vals < 0):
        raise ValueError("sampled density has negative entries")
    if total is not None:
        mass = grid.h * vals.sum()
        if mass <= 0:
            raise ValueError("cannot renormalize a density with zero mass")
        vals = vals * (total / mass)
    return vals


def rho0_benchmark(x) -> np.ndarray:
    """Initial marginal of the 1-D killed heat-flow example on [0, 1]."""
    x = np.asarray(x, dtype=float)
    left = 0.3 - 0.3 * np.cos(3 * np.pi * x)
    right = 2.4 - 2.4 * np.cos(6 * np.pi * x - 4 * np.pi)
    out = np.where(x < 2.0 / 3.0, left, right)
    # the cosine forms can round to tiny negatives at their zeros
    return np.clip(out, 0.0, None)


def rho1_benchmark(s: float) -> Callable[[np.ndarray], np.ndarray]:
    """Terminal marginal ``s * rho0(1 - x)`` of the same example."""
    if not 0 < s <= 1:
        raise ValueError("survival fraction s must lie in (0, 1]")

    def rho1(x):
        return s * rho0_benchmark(1.0 - np.asarray(x, dtype=float))

    return rho1
