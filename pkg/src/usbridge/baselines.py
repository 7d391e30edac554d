"""Reference solvers the unbalanced bridge is compared against.

* ``solve_classic``: balanced Schroedinger bridge, two-sided Sinkhorn on an
  endpoint kernel.
* ``solve_reweighted``: bridge over the Feynman-Kac reweighted (surviving
  paths only) prior, i.e. the balanced problem on the killed kernel with the
  terminal marginal renormalized to a probability.
* ``static_oracle``: plain iterative proportional fitting of the prior joint
  law on grid cells plus coffin, independent of any potential bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion_kernels import KernelBundle, propagate_backward, propagate_forward
from .hilbert import HilbertReport, hilbert_distance
from .usbp import ConvergenceError, ProblemInstance, SupportError, prior_joint


@dataclass
class ClassicBridge:
    phi: np.ndarray
    phi_hat: np.ndarray
    marginal_P: np.ndarray
    iterations: int
    hilbert_report: HilbertReport

    def total_mass(self, h: float) -> np.ndarray:
        return h * self.marginal_P.sum(axis=1)

    def drift_correction(self, a, h: float) -> np.ndarray:
        return a * np.gradient(np.log(self.phi), h, axis=1)


@dataclass
class ReweightedBridge(ClassicBridge):
    rho1_normalized: np.ndarray = None


@dataclass
class StaticCoupling:
    pi: np.ndarray
    R: np.ndarray
    row_scaling: np.ndarray
    col_scaling: np.ndarray
    entropy: float
    residual: float
    iterations: int


def _sinkhorn(rho0, rho1, bundle: KernelBundle, tol, max_iter):
    K = bundle.K
    on0 = rho0 > 0
    on1 = rho1 > 0
    report = HilbertReport()
    phi1 = np.ones_like(rho1)
    phi_hat1 = None
    for it in range(1, max_iter + 1):
        phi0 = K @ phi1
        if np.any(phi0[on0] <= 0):
            raise SupportError("kernel does not connect supports")
        phi_hat0 = np.where(on0, rho0 / np.where(on0, phi0, 1.0), 0.0)
        new = K.T @ phi_hat0
        if np.any(new[on1] <= 0):
            raise SupportError("kernel does not connect supports")
        new /= new.max()
        phi1 = np.where(on1, rho1 / np.where(on1, new, 1.0), 0.0)
        if phi_hat1 is not None:
            d = hilbert_distance(new, phi_hat1, on0 | on1)
            report.distances.append(d)
            if d < tol:
                return phi1, it, report
        phi_hat1 = new
    raise ConvergenceError(f"Sinkhorn did not converge in {max_iter} iterations")


def _flow(rho0, phi1, bundle):
    phi = propagate_backward(bundle, phi1, 0.0)
    on0 = rho0 > 0
    phi_hat0 = np.where(on0, rho0 / np.where(on0, phi[0], 1.0), 0.0)
    phi_hat, _ = propagate_forward(bundle, phi_hat0)
    return phi, phi_hat


def solve_classic(rho0, rho1, bundle: KernelBundle, tol: float = 1e-9,
                  max_iter: int = 5000) -> ClassicBridge:
    """Balanced bridge between two unit-mass densities on ``bundle``'s kernel.

    The backward potential carries no coffin source, so if the bundle has a
    killing rate it acts as a Feynman-Kac weight on paths.
    """
    h = bundle.grid.h
    rho0 = np.asarray(rho0, dtype=float)
    rho1 = np.asarray(rho1, dtype=float)
    for name, rho in (("rho0", rho0), ("rho1", rho1)):
        if abs(h * rho.sum() - 1.0) > 1e-10:
            raise ValueError(f"{name} must have unit mass")
    phi1, it, report = _sinkhorn(rho0, rho1, bundle, tol, max_iter)
    phi, phi_hat = _flow(rho0, phi1, bundle)
    return ClassicBridge(phi, phi_hat, phi * phi_hat, it, report)


def solve_reweighted(rho0, rho1, bundle: KernelBundle, tol: float = 1e-9,
                     max_iter: int = 5000) -> ReweightedBridge:
    """Bridge over surviving paths only; ``rho1`` is renormalized to mass 1."""
    h = bundle.grid.h
    rho1 = np.asarray(rho1, dtype=float)
    rho1_hat = rho1 / (h * rho1.sum())
    cb = solve_classic(rho0, rho1_hat, bundle, tol, max_iter)
    return ReweightedBridge(cb.phi, cb.phi_hat, cb.marginal_P, cb.iterations,
                            cb.hilbert_report, rho1_normalized=rho1_hat)


def static_oracle(inst: ProblemInstance, bundle: KernelBundle, tol: float = 1e-10,
                  max_iter: int = 200000) -> StaticCoupling:
    """Entropic projection of the prior joint law onto the endpoint constraints."""
    n = inst.grid.n_cells
    if n > 64:
        raise ValueError("static oracle is limited to n_cells <= 64")
    h = inst.grid.h
    R = prior_joint(inst.rho0, bundle)
    p0 = np.append(h * inst.rho0, 0.0).astype(np.longdouble)
    p1 = np.append(h * inst.rho1, inst.c1).astype(np.longdouble)
    if inst.c1 > 0 and not np.any(R[:n, n] > 0):
        raise ValueError("infeasible: target coffin mass is not reachable under the prior")
    reach = R.sum(axis=0) > 0
    if np.any((p1 > 0) & ~reach):
        raise ValueError("infeasible: target marginal charges states the prior never reaches")

    Rl = R.astype(np.longdouble)
    u = np.ones(n + 1, dtype=np.longdouble)
    v = np.ones(n + 1, dtype=np.longdouble)
    resid = np.inf
    for it in range(1, max_iter + 1):
        rows = (Rl * v[None, :]).sum(axis=1)
        u = np.where(p0 > 0, p0 / np.where(rows > 0, rows, 1), 0)
        cols = (Rl * u[:, None]).sum(axis=0)
        v = np.where(p1 > 0, p1 / np.where(cols > 0, cols, 1), 0)
        pi = u[:, None] * Rl * v[None, :]
        resid = float(max(np.max(np.abs(pi.sum(axis=1) - p0)),
                          np.max(np.abs(pi.sum(axis=0) - p1))))
        if resid < tol:
            break
    else:
        raise ConvergenceError(f"IPF residual {resid:.3e} after {max_iter} sweeps")
    pi64 = np.asarray(pi, dtype=float)
    return StaticCoupling(pi64, R, np.asarray(u, float), np.asarray(v, float),
                          relative_entropy(pi64, R), resid, it)


def relative_entropy(pi, R) -> float:
    """``sum pi log(pi / R)``; ``inf`` unless ``pi`` is dominated by ``R``."""
    pi = np.asarray(pi, dtype=float)
    R = np.asarray(R, dtype=float)
    if np.any((pi > 0) & (R <= 0)):
        return float("inf")
    on = pi > 0
    return float(np.sum(pi[on] * np.log(pi[on] / R[on])) - pi.sum() + R.sum())
