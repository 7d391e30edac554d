"""Killed Fokker-Planck operator, its adjoint, and Crank-Nicolson propagators.

The forward operator acts on densities,

    L^dag rho = -d/dx (b rho) + 1/2 d^2/dx^2 (a rho) - V rho,

written in flux form with no-flux walls so that with ``V = 0`` the columns of
the matrix sum to zero.  The backward operator acting on functions is its
exact transpose, which makes the discrete forward/backward pair adjoint with
respect to ``<rho, phi> = h * sum(rho * phi)``.

Each fine step is Strang-split: an exact exponential half-step of the killing
rate, a Crank-Nicolson step of the killing-free operator, and another killing
half-step.  Transport then conserves mass exactly and the killed mass of a step
is known in closed form, so survival plus absorption balances to rounding
error.  A killing rate that is constant in space factors out of the kernel
exactly, as it does for the continuous semigroup.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from ._backend import get_kernels
from .grid import SpaceGrid, TimeMesh

logger = logging.getLogger(__name__)

Field = Union[float, Callable[[float, np.ndarray], np.ndarray]]


def _as_field(f: Field) -> Callable[[float, np.ndarray], np.ndarray]:
    if callable(f):
        return f
    c = float(f)
    return lambda t, x: np.full(np.shape(x), c)


@dataclass(frozen=True)
class KilledDiffusionSpec:
    """Coefficients of ``dX = b dt + sigma dW`` killed at rate ``V``.

    Each coefficient is a constant or a callable ``f(t, x)`` vectorized in x.
    """

    b: Field = 0.0
    sigma: Field = 1.0
    V: Field = 0.0

    def drift(self, t, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(_as_field(self.b)(t, x), dtype=float), np.shape(x))

    def diffusion(self, t, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(_as_field(self.sigma)(t, x), dtype=float), np.shape(x))

    def a(self, t, x) -> np.ndarray:
        return self.diffusion(t, x) ** 2

    def killing(self, t, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(_as_field(self.V)(t, x), dtype=float), np.shape(x))

    def check(self, grid: SpaceGrid, tm: TimeMesh, require_killing: bool = False) -> None:
        x = grid.nodes
        kill_seen = False
        for t in tm.times:
            sig = self.diffusion(t, x)
            if np.any(~np.isfinite(sig)) or np.min(sig ** 2) <= 0:
                raise ValueError(f"diffusion coefficient not positive at t={t:g}")
            V = self.killing(t, x)
            if np.any(V < 0) or np.any(~np.isfinite(V)):
                raise ValueError(f"killing rate must be finite and >= 0 (t={t:g})")
            kill_seen = kill_seen or bool(np.any(V > 0))
        if require_killing and not kill_seen:
            raise ValueError("killing rate is identically zero")


@dataclass(frozen=True)
class Generator:
    """Tridiagonal ``L^dag`` at one time, bands ``(sub, diag, sup)``."""

    bands: np.ndarray
    h: float

    def dense(self) -> np.ndarray:
        sub, diag, sup = self.bands
        return np.diag(diag) + np.diag(sub[1:], -1) + np.diag(sup[:-1], 1)

    def adjoint_dense(self) -> np.ndarray:
        return self.dense().T

    def apply(self, rho) -> np.ndarray:
        return self.dense() @ np.asarray(rho, dtype=float)

    def apply_adjoint(self, phi) -> np.ndarray:
        return self.dense().T @ np.asarray(phi, dtype=float)


def build_generator(spec: KilledDiffusionSpec, grid: SpaceGrid, t: float,
                    include_killing: bool = True) -> Generator:
    x = grid.nodes
    h = grid.h
    b = spec.drift(t, x)
    a = spec.a(t, x)
    V = spec.killing(t, x)
    if np.min(a) <= 0:
        raise ValueError("ellipticity violated: a(t, x) must be > 0")
    n = grid.n_cells
    sub = np.zeros(n)
    diag = np.zeros(n)
    sup = np.zeros(n)
    # row i gets -(J_{i+1/2} - J_{i-1/2}) / h with
    # J_{i+1/2} = (b_i rho_i + b_{i+1} rho_{i+1}) / 2 - (a_{i+1} rho_{i+1} - a_i rho_i) / (2h)
    left = b[:-1] / (2 * h) + a[:-1] / (2 * h * h)    # coefficient of rho_i in J_{i+1/2}
    right = b[1:] / (2 * h) - a[1:] / (2 * h * h)     # coefficient of rho_{i+1} in J_{i+1/2}
    diag[:-1] -= left
    sup[:-1] -= right
    diag[1:] += right
    sub[1:] += left
    if include_killing:
        diag -= V
    return Generator(np.stack([sub, diag, sup]), h)


@dataclass(frozen=True)
class KernelBundle:
    """Discrete propagators of the killed diffusion on one space-time mesh.

    ``K[i, j]`` is the mass found in cell j at t = 1 from a unit mass started in
    cell i; ``r[i]`` is the mass killed on the way.  ``implicit``/``explicit``
    hold the Crank-Nicolson bands of every fine step (``substeps`` fine steps
    per coarse step of ``tm``).
    """

    grid: SpaceGrid
    tm: TimeMesh
    substeps: int
    implicit: np.ndarray = field(repr=False)
    explicit: np.ndarray = field(repr=False)
    decay: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)
    tol_mass: float = 1e-6
    backend: str | None = None

    @property
    def n_fine(self) -> int:
        return self.implicit.shape[1]

    def _kern(self):
        return get_kernels(self.backend)

    def step_forward(self, k: int, x) -> np.ndarray:
        """Apply ``F_k`` (coarse step k) to a density or a stack of them."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sl = slice(k * self.substeps, (k + 1) * self.substeps)
        out, _, _ = self._kern().forward_sweep(
            np.ascontiguousarray(self.implicit[:, sl]), np.ascontiguousarray(self.explicit[:, sl]),
            np.ascontiguousarray(self.decay[sl]), np.ascontiguousarray(x),
            self.substeps, self.grid.h, False)
        return out

    def step_backward(self, k: int, phi, psi: float = 0.0) -> np.ndarray:
        """Apply the adjoint step ``B_k`` (plus coffin source ``psi``)."""
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        sl = slice(k * self.substeps, (k + 1) * self.substeps)
        out, _ = self._kern().backward_sweep(
            np.ascontiguousarray(self.implicit[:, sl]), np.ascontiguousarray(self.explicit[:, sl]),
            np.ascontiguousarray(self.decay[sl]), np.ascontiguousarray(phi),
            np.full(phi.shape[0], float(psi)), self.substeps, False)
        return out

    def forward_matrix(self, k: int) -> np.ndarray:
        n = self.grid.n_cells
        return self.step_forward(k, np.eye(n)).T

    def backward_matrix(self, k: int) -> np.ndarray:
        n = self.grid.n_cells
        return self.step_backward(k, np.eye(n)).T

    def absorbed_weights(self) -> np.ndarray:
        """Per-coarse-step killing functionals ``a_k`` with
        ``absorbed_k = h * <a_k, rho_k>``."""
        n = self.grid.n_cells
        out = np.empty((self.tm.n_steps, n))
        for k in range(self.tm.n_steps):
            out[k] = 1.0 - self.step_backward(k, np.ones(n))[0]
        return out


def _fine_bands(spec, grid, n_fine):
    dt = 1.0 / n_fine
    tau = 0.5 * dt
    n = grid.n_cells
    A = np.empty((3, n_fine, n))
    E = np.empty((3, n_fine, n))
    decay = np.empty((n_fine, n))
    for j in range(n_fine):
        t_mid = (j + 0.5) * dt
        L = build_generator(spec, grid, t_mid, include_killing=False).bands
        A[:, j] = -tau * L
        A[1, j] += 1.0
        E[:, j] = tau * L
        E[1, j] += 1.0
        decay[j] = np.exp(-tau * spec.killing(t_mid, grid.nodes))
    return A, E, decay


def _positivity_defect(A, E, pos_tol) -> tuple[bool, bool]:
    """(explicit part has negative entries, implicit part is not an M-matrix)."""
    explicit_bad = bool(np.min(E) < -pos_tol)
    implicit_bad = bool(max(np.max(A[0]), np.max(A[2])) > pos_tol)
    return explicit_bad, implicit_bad


def build_kernel_bundle(spec: KilledDiffusionSpec, grid: SpaceGrid, tm: TimeMesh,
                        tol_mass: float = 1e-6, max_refinements: int = 10,
                        pos_tol: float = 1e-12, backend: str | None = None) -> KernelBundle:
    """Build propagators, the endpoint kernel ``K`` and absorbed mass ``r``.

    Each coarse step is split into ``2**m`` Crank-Nicolson substeps, with ``m``
    the smallest refinement for which every step maps nonnegative densities to
    nonnegative densities.
    """
    spec.check(grid, tm)
    substeps = 1
    for _ in range(max_refinements + 1):
        A, E, decay = _fine_bands(spec, grid, tm.n_steps * substeps)
        explicit_bad, implicit_bad = _positivity_defect(A, E, pos_tol)
        if not (explicit_bad or implicit_bad):
            break
        substeps *= 2
    else:
        raise ValueError(
            "Crank-Nicolson step is not positivity preserving even at "
            f"dt = {1.0 / (tm.n_steps * substeps // 2):.3e}; refine the spatial grid "
            "(drift too large for central differences: need |b| h <= a)")
    if substeps > 1:
        logger.info("using %d Crank-Nicolson substeps per step", substeps)

    kern = get_kernels(backend)
    n = grid.n_cells
    impulses = np.eye(n) / grid.h
    final, _, absorbed = kern.forward_sweep(A, E, decay, impulses, substeps, grid.h, False)
    K = final * grid.h
    r = absorbed[-1].copy()
    if np.min(K) < 0:
        raise ValueError("endpoint kernel has negative entries")
    defect = np.max(np.abs(K.sum(axis=1) + r - 1.0))
    if defect > tol_mass:
        raise ValueError(f"survival + absorption deviates from 1 by {defect:.3e}")
    for arr in (A, E, decay, K, r):
        arr.setflags(write=False)
    return KernelBundle(grid=grid, tm=tm, substeps=substeps, implicit=A, explicit=E,
                        decay=decay, K=K, r=r, tol_mass=tol_mass, backend=backend)


def propagate_forward(bundle: KernelBundle, phi_hat0) -> tuple[np.ndarray, np.ndarray]:
    """Forward trajectory of ``phi_hat`` and the accumulated coffin potential.

    Returns ``(phi_hat[k, i], psi_hat[k])`` for k = 0..n_steps with
    ``psi_hat[0] = 0``.
    """
    x = np.asarray(phi_hat0, dtype=float)
    if np.any(x < 0):
        raise ValueError("forward propagation needs a nonnegative initial state")
    _, traj, absorbed = bundle._kern().forward_sweep(
        bundle.implicit, bundle.explicit, bundle.decay, np.ascontiguousarray(x[None, :]),
        bundle.substeps, bundle.grid.h, True)
    return traj[:, 0, :], absorbed[:, 0]


def propagate_backward(bundle: KernelBundle, phi1, psi: float) -> np.ndarray:
    """Backward trajectory ``phi[k, i]`` from terminal ``phi1`` with constant
    coffin potential ``psi`` feeding the source term."""
    y = np.asarray(phi1, dtype=float)
    if np.any(y < 0) or psi < 0:
        raise ValueError("backward propagation needs nonnegative terminal data")
    _, traj = bundle._kern().backward_sweep(
        bundle.implicit, bundle.explicit, bundle.decay, np.ascontiguousarray(y[None, :]),
        np.array([float(psi)]), bundle.substeps, True)
    return traj[:, 0, :]
