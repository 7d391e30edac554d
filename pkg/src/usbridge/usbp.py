"""Fixed-point solver for the Schroedinger system of a diffusion with killing.

The unknowns are the forward potential ``phi_hat`` (with coffin part
``psi_hat``) and the backward potential ``phi`` (with constant coffin part
``psi``).  One sweep of the iteration maps the terminal forward state

    (phi_hat(1), psi_hat(1))
        -> invert on supports, scale by (rho1, c1)  -> (phi(1), psi)
        -> backward solve                           -> phi(0)
        -> invert on supp rho0, scale by rho0       -> phi_hat(0)
        -> forward solve                            -> (phi_hat(1), psi_hat(1))

and is a strict contraction in the Hilbert metric.  The two linear solves
reduce to the endpoint kernel ``K`` and absorbed-mass vector ``r`` of a
``KernelBundle``; full trajectories are only propagated once, after
convergence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffusion_kernels import (KernelBundle, KilledDiffusionSpec, propagate_backward,
                                propagate_forward)
from .grid import AugmentedFunction, SpaceGrid, TimeMesh, rho0_benchmark, sample_density
from .hilbert import HilbertReport, hilbert_distance

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, last_distance=None):
        super().__init__(message)
        self.last_distance = last_distance


class SupportError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemInstance:
    spec: KilledDiffusionSpec
    grid: SpaceGrid
    tm: TimeMesh
    rho0: np.ndarray
    rho1: np.ndarray
    s: float | None = None

    def __post_init__(self):
        h = self.grid.h
        rho0 = np.array(self.rho0, dtype=float)
        rho1 = np.array(self.rho1, dtype=float)
        for arr in (rho0, rho1):
            if arr.shape != (self.grid.n_cells,):
                raise ValueError("marginals must have one entry per cell")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError("marginals must be finite and nonnegative")
            arr.setflags(write=False)
        if abs(h * rho0.sum() - 1.0) > 1e-10:
            raise ValueError(f"rho0 must have unit mass, got {h * rho0.sum():.12g}")
        if not -1e-12 <= 1.0 - h * rho1.sum() < 1.0:
            raise ValueError("rho1 must have mass in (0, 1]")
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "rho1", rho1)

    @property
    def c1(self) -> float:
        """Terminal coffin mass, ``1 - h * sum(rho1)``."""
        c = 1.0 - self.grid.h * float(self.rho1.sum())
        return 0.0 if abs(c) < 1e-12 else c

    @classmethod
    def benchmark(cls, s: float, n_cells: int = 256, n_steps: int = 400,
                  sigma: float = 0.05, V: float = 1.0) -> "ProblemInstance":
        """The 1-D example: ``dX = sigma dW`` on [0, 1], ``V = 1``,
        ``rho1(x) = s * rho0(1 - x)``."""
        if not 0 < s <= 1:
            raise ValueError("s must lie in (0, 1]")
        grid = SpaceGrid(0.0, 1.0, n_cells)
        rho0 = sample_density(rho0_benchmark, grid, total=1.0)
        # reflected samples of the normalized profile keep h*sum(rho1) == s
        rho1 = s * rho0[::-1]
        spec = KilledDiffusionSpec(b=0.0, sigma=sigma, V=V)
        return cls(spec, grid, TimeMesh(n_steps), rho0, rho1, s=s)


@dataclass(frozen=True)
class EndpointState:
    """Terminal forward potentials, the quantity the iteration contracts."""

    phi_hat1: np.ndarray
    psi_hat1: float
    log_scale: float = 0.0

    def stacked(self) -> np.ndarray:
        return np.append(self.phi_hat1, self.psi_hat1)


@dataclass
class Sweep:
    """Intermediate potentials of one fixed-point sweep."""

    phi1: np.ndarray
    psi: float
    phi0: np.ndarray
    psi0: float
    phi_hat0: np.ndarray
    state: EndpointState


@dataclass
class PotentialQuadruple:
    phi_hat: np.ndarray   # (n_steps + 1, n_cells)
    psi_hat: np.ndarray   # (n_steps + 1,)
    phi: np.ndarray       # (n_steps + 1, n_cells)
    psi: float


@dataclass
class StaticFactors:
    f: AugmentedFunction
    g: AugmentedFunction


@dataclass
class BridgeSolution:
    potentials: PotentialQuadruple
    drift_correction: np.ndarray
    posterior_killing: np.ndarray
    marginal_P: np.ndarray
    coffin_mass: np.ndarray
    iterations: int
    hilbert_report: HilbertReport = field(default_factory=HilbertReport)
    grid: SpaceGrid | None = None
    tm: TimeMesh | None = None
    final_state: EndpointState | None = None

    @property
    def surviving_mass(self) -> np.ndarray:
        return self.grid.h * self.marginal_P.sum(axis=1)

    @property
    def alpha(self) -> np.ndarray:
        """Ratio of posterior to prior killing rate, ``psi / phi``."""
        with np.errstate(divide="ignore"):
            return self.potentials.psi / self.potentials.phi

    def static_factors(self, rho0) -> StaticFactors:
        phi0 = self.potentials.phi[0]
        f = np.zeros_like(phi0)
        on = np.asarray(rho0) > 0
        f[on] = 1.0 / phi0[on]
        return StaticFactors(AugmentedFunction(f, 0.0),
                             AugmentedFunction(self.potentials.phi[-1], self.potentials.psi))

    def static_coupling(self, inst: ProblemInstance, bundle: KernelBundle) -> np.ndarray:
        """``f(x) g(y) R01(x, y)`` as an (n+1) x (n+1) matrix of masses."""
        fac = self.static_factors(inst.rho0)
        R = prior_joint(inst.rho0, bundle)
        return fac.f.stacked()[:, None] * R * fac.g.stacked()[None, :]


def prior_joint(rho0, bundle: KernelBundle) -> np.ndarray:
    """Joint law of (X0, X1) under the prior on grid cells plus coffin."""
    h = bundle.grid.h
    n = bundle.grid.n_cells
    w = h * np.asarray(rho0, dtype=float)
    R = np.zeros((n + 1, n + 1))
    R[:n, :n] = w[:, None] * bundle.K
    R[:n, n] = w * bundle.r
    return R


def _support_masks(inst: ProblemInstance):
    on0 = inst.rho0 > 0
    on1 = inst.rho1 > 0
    return on0, on1


def state_mask(inst: ProblemInstance) -> np.ndarray:
    """Coordinates of the endpoint state that enter the Hilbert metric."""
    on0, on1 = _support_masks(inst)
    return np.append(on0 | on1, inst.c1 > 0)


def _backward_endpoint(state: EndpointState, inst: ProblemInstance, bundle: KernelBundle):
    _, on1 = _support_masks(inst)
    phi_hat1 = state.phi_hat1
    if np.any(phi_hat1[on1] <= 0):
        raise SupportError("kernel does not connect supports: phi_hat(1) vanished on supp rho1")
    phi1 = np.zeros_like(phi_hat1)
    phi1[on1] = inst.rho1[on1] / phi_hat1[on1]
    c1 = inst.c1
    if c1 > 0:
        if not state.psi_hat1 > 0:
            raise SupportError("kernel does not connect supports: no absorbed mass to match c1")
        psi = c1 / state.psi_hat1
    else:
        psi = 0.0
    phi0 = bundle.K @ phi1 + bundle.r * psi
    return phi1, psi, phi0


def _forward_endpoint(phi0, inst: ProblemInstance, bundle: KernelBundle):
    on0, _ = _support_masks(inst)
    if np.any(phi0[on0] <= 0):
        raise SupportError("kernel does not connect supports: phi(0) vanished on supp rho0")
    phi_hat0 = np.zeros_like(phi0)
    phi_hat0[on0] = inst.rho0[on0] / phi0[on0]
    phi_hat1 = bundle.K.T @ phi_hat0
    psi_hat1 = float(bundle.grid.h * (bundle.r @ phi_hat0))
    return phi_hat0, phi_hat1, psi_hat1


def _normalized(phi_hat1, psi_hat1, log_scale, coffin_active) -> EndpointState:
    scale = float(np.max(phi_hat1))
    if coffin_active:
        scale = max(scale, psi_hat1)
    if not scale > 0 or not np.isfinite(scale):
        raise SupportError("iterate left the positive cone")
    return EndpointState(phi_hat1 / scale, psi_hat1 / scale, log_scale + np.log(scale))


def initial_state(inst: ProblemInstance, bundle: KernelBundle, scale: float = 1.0,
                  normalize: bool = True) -> EndpointState:
    """Forward half-sweep from ``phi(0) = scale`` everywhere."""
    phi0 = np.full(inst.grid.n_cells, float(scale))
    _, phi_hat1, psi_hat1 = _forward_endpoint(phi0, inst, bundle)
    if not normalize:
        return EndpointState(phi_hat1, psi_hat1)
    return _normalized(phi_hat1, psi_hat1, 0.0, inst.c1 > 0)


def iterate_once(state: EndpointState, inst: ProblemInstance, bundle: KernelBundle,
                 modified: bool = False, normalize: bool = True) -> Sweep:
    """One application of the composed map to ``state``.

    With ``modified=True`` the coffin output of the backward half is replaced
    by ``phi(0, z)`` for a fixed ``z`` in supp rho0; the next state does not
    depend on that value, which is what this switch is for checking.
    """
    phi1, psi, phi0 = _backward_endpoint(state, inst, bundle)
    if modified:
        z = int(np.argmax(inst.rho0))
        psi0 = float(phi0[z])
    else:
        psi0 = psi
    phi_hat0, phi_hat1, psi_hat1 = _forward_endpoint(phi0, inst, bundle)
    if normalize:
        new = _normalized(phi_hat1, psi_hat1, state.log_scale, inst.c1 > 0)
    else:
        new = EndpointState(phi_hat1, psi_hat1, state.log_scale)
    return Sweep(phi1, psi, phi0, psi0, phi_hat0, new)


def assemble_posterior(qd: PotentialQuadruple, spec: KilledDiffusionSpec, grid: SpaceGrid,
                       tm: TimeMesh) -> dict:
    """Posterior drift correction, killing rate and marginal flow."""
    phi, phi_hat = qd.phi, qd.phi_hat
    if np.any((phi <= 0) & (phi_hat > 0)):
        raise SupportError("phi vanishes where phi_hat is positive")
    x = grid.nodes
    a = np.stack([spec.a(t, x) for t in tm.times])
    V = np.stack([spec.killing(t, x) for t in tm.times])
    with np.errstate(divide="ignore", invalid="ignore"):
        logphi = np.log(phi)
        grad = np.gradient(logphi, grid.h, axis=1)
        killing = np.where(phi > 0, qd.psi * V / phi, 0.0)
    drift = np.where(np.isfinite(grad), a * grad, 0.0)
    return dict(
        drift_correction=drift,
        posterior_killing=killing,
        marginal_P=phi * phi_hat,
        coffin_mass=qd.psi * qd.psi_hat,
    )


def endpoint_residual(sol: BridgeSolution, inst: ProblemInstance) -> float:
    """Largest relative violation of the three endpoint constraints."""
    qd = sol.potentials
    on0, on1 = _support_masks(inst)
    res0 = np.max(np.abs(qd.phi[0][on0] * qd.phi_hat[0][on0] / inst.rho0[on0] - 1.0))
    res1 = np.max(np.abs(qd.phi[-1][on1] * qd.phi_hat[-1][on1] / inst.rho1[on1] - 1.0))
    resc = 0.0
    if inst.c1 > 0:
        resc = abs(qd.psi * qd.psi_hat[-1] / inst.c1 - 1.0)
    return float(max(res0, res1, resc))


def solve(inst: ProblemInstance, bundle: KernelBundle, tol: float = 1e-9,
          max_iter: int = 5000, init_scale: float = 1.0) -> BridgeSolution:
    """Iterate to the fixed point and assemble the bridge.

    Stops when the Hilbert distance between successive endpoint states drops
    below ``tol``.
    """
    if bundle.grid != inst.grid or bundle.tm != inst.tm:
        raise ValueError("kernel bundle was built on a different mesh")
    if np.min(bundle.K) <= 0:
        raise SupportError("endpoint kernel must be strictly positive")
    mask = state_mask(inst)
    report = HilbertReport()
    state = initial_state(inst, bundle, init_scale)
    d = np.inf
    for it in range(1, max_iter + 1):
        new = iterate_once(state, inst, bundle).state
        d = hilbert_distance(new.stacked(), state.stacked(), mask)
        report.distances.append(d)
        state = new
        if d < tol:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (d_H = {d:.3e})", d)
    logger.debug("converged in %d iterations, d_H = %.3e", it, d)

    sol = _finish(state, inst, bundle, it, report)
    resid = endpoint_residual(sol, inst)
    if resid > 10 * tol:
        raise ConvergenceError(f"inconsistent discretization: endpoint residual {resid:.3e}", d)
    return sol


def _finish(state, inst, bundle, iterations, report) -> BridgeSolution:
    phi1, psi, _ = _backward_endpoint(state, inst, bundle)
    phi = propagate_backward(bundle, phi1, psi)
    on0, _ = _support_masks(inst)
    phi_hat0 = np.zeros_like(phi[0])
    phi_hat0[on0] = inst.rho0[on0] / phi[0][on0]
    phi_hat, psi_hat = propagate_forward(bundle, phi_hat0)
    qd = PotentialQuadruple(phi_hat, psi_hat, phi, psi)
    fields = assemble_posterior(qd, inst.spec, inst.grid, inst.tm)
    return BridgeSolution(potentials=qd, iterations=iterations, hilbert_report=report,
                          grid=inst.grid, tm=inst.tm, final_state=state, **fields)


@dataclass
class EigenReport:
    ratio: float
    spread: float
    pairing: float


def _pair(u, v, h):
    return float(h * np.dot(u[:-1], v[:-1]) + u[-1] * v[-1])


def composed_map(hvec, inst: ProblemInstance, bundle: KernelBundle) -> np.ndarray:
    """The composed map written as ``E^dag . E_p0 . E . E_p1`` on stacked vectors."""
    n = inst.grid.n_cells
    on0, on1 = _support_masks(inst)
    u = np.asarray(hvec, dtype=float)
    # E_p1: divide the terminal data by the state
    a = np.zeros(n + 1)
    a[:n][on1] = inst.rho1[on1] / u[:n][on1]
    a[n] = inst.c1 / u[n] if inst.c1 > 0 else 0.0
    # E: backward kernel, coffin value carried along
    b = np.append(bundle.K @ a[:n] + bundle.r * a[n], a[n])
    # E_p0: divide the initial data, nothing sits in the coffin at t = 0
    c = np.zeros(n + 1)
    c[:n][on0] = inst.rho0[on0] / b[:n][on0]
    # adjoint of E for the pairing h*<u, v> + u_c v_c
    return np.append(bundle.K.T @ c[:n], bundle.grid.h * (bundle.r @ c[:n]) + c[n])


def fixed_point_eigenvalue(state: EndpointState | np.ndarray, inst: ProblemInstance,
                           bundle: KernelBundle) -> EigenReport:
    """Ratio ``C(h) / h`` at a (putative) fixed point ``h``.

    ``ratio`` is the sup-norm ratio over the active coordinates and ``spread``
    the spread of the componentwise ratios; ``pairing`` is
    ``<E_p1(h), C(h)>``, which equals the eigenvalue whenever ``C(h)`` is a
    multiple of ``h``.
    """
    hvec = state.stacked() if isinstance(state, EndpointState) else np.asarray(state, float)
    img = composed_map(hvec, inst, bundle)
    mask = state_mask(inst)
    comp = img[mask] / hvec[mask]
    ratio = float(np.max(np.abs(img[mask])) / np.max(np.abs(hvec[mask])))
    n = inst.grid.n_cells
    on1 = inst.rho1 > 0
    ep1 = np.zeros(n + 1)
    ep1[:n][on1] = inst.rho1[on1] / hvec[:n][on1]
    if inst.c1 > 0:
        ep1[n] = inst.c1 / hvec[n]
    return EigenReport(ratio, float(comp.max() - comp.min()), _pair(ep1, img, inst.grid.h))
