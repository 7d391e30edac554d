"""Checks on a computed bridge: fluid-dynamic cost, PDE residuals, particles.

Residuals use central finite differences on the stored space-time fields,
independently of the Crank-Nicolson stencils that produced them, so they
measure discretization error rather than echo the solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import get_kernels
from ._pykernels import _mix, _uniform
from .diffusion_kernels import KilledDiffusionSpec
from .grid import SpaceGrid, TimeMesh
from .usbp import BridgeSolution

_GOLDEN = 0x9E3779B97F4A7C15


def _fields(spec: KilledDiffusionSpec, grid: SpaceGrid, times):
    x = grid.nodes
    b = np.stack([spec.drift(t, x) for t in times])
    a = np.stack([spec.a(t, x) for t in times])
    V = np.stack([spec.killing(t, x) for t in times])
    return b, a, V


def _trapz_time(f, dt) -> float:
    w = np.full(f.shape[0], dt)
    w[0] = w[-1] = 0.5 * dt
    return float(w @ f)


# ---------------------------------------------------------------- cost

@dataclass(frozen=True)
class CostReport:
    kinetic: float
    killing_entropy: float

    @property
    def total(self) -> float:
        return self.kinetic + self.killing_entropy


def entropy_integrand(alpha) -> np.ndarray:
    """``alpha log alpha - alpha + 1`` with the limit value 1 at ``alpha = 0``."""
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(alpha > 0, alpha * np.log(alpha), 0.0)
    return xlogx - alpha + 1.0


def evaluate_cost(sol: BridgeSolution, spec: KilledDiffusionSpec, grid: SpaceGrid,
                  tm: TimeMesh) -> CostReport:
    """Kinetic and killing-entropy cost of the optimal flow.

    Uses ``u = sigma d/dx log(phi)`` and ``alpha = psi / phi``; midpoint rule in
    space, trapezoid rule in time.
    """
    _, a, V = _fields(spec, grid, tm.times)
    P = sol.marginal_P
    phi = sol.potentials.phi
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = np.gradient(np.log(phi), grid.h, axis=1)
        alpha = np.where(phi > 0, sol.potentials.psi / phi, 0.0)
    on = P > 0
    kin = np.where(on, 0.5 * a * grad ** 2 * P, 0.0)
    kil = np.where(on, entropy_integrand(alpha) * V * P, 0.0)
    h = grid.h
    return CostReport(_trapz_time(h * kin.sum(axis=1), tm.dt),
                      _trapz_time(h * kil.sum(axis=1), tm.dt))


def reweighted_cost(marginal_P, drift_correction, spec: KilledDiffusionSpec, grid: SpaceGrid,
                    tm: TimeMesh) -> CostReport:
    """Cost ``int int [|u|^2 / 2 + V] P`` of a flow over the reweighted prior.

    The second term is reported as ``killing_entropy`` so the two problems
    can be tabulated side by side.
    """
    _, a, V = _fields(spec, grid, tm.times)
    P = np.asarray(marginal_P)
    kin = 0.5 * np.asarray(drift_correction) ** 2 / a * P
    h = grid.h
    return CostReport(_trapz_time(h * kin.sum(axis=1), tm.dt),
                      _trapz_time(h * (V * P).sum(axis=1), tm.dt))


def flux_route_cost(P, kill_mid, spec: KilledDiffusionSpec, grid: SpaceGrid, tm: TimeMesh,
                    prior_kill_mid=None, p_floor: float = 1e-10) -> CostReport:
    """Cost of the cheapest control that moves ``P`` with posterior killing
    rate ``kill_mid`` (given at step midpoints, shape ``(n_steps, n)``).

    The killing field is first rescaled per step so the discrete mass balance
    closes exactly; the drift is then read off the flux that the continuity
    equation leaves over.  Faces where ``P`` is below ``p_floor * max(P)`` are
    left out of the kinetic term.
    """
    P = np.asarray(P, dtype=float)
    dt, h = tm.dt, grid.h
    tmid = tm.times[:-1] + 0.5 * dt
    b, a, V = _fields(spec, grid, tmid)
    if prior_kill_mid is not None:
        V = np.asarray(prior_kill_mid, dtype=float)
    Pm = 0.5 * (P[1:] + P[:-1])
    dP = (P[1:] - P[:-1]) / dt
    kr = np.asarray(kill_mid, dtype=float) * Pm
    scale = -dP.sum(axis=1) / kr.sum(axis=1)
    kill = kill_mid * scale[:, None]
    src = dP + kill * Pm
    G = -h * np.cumsum(src, axis=1)[:, :-1]             # flux through interior faces
    aP = a * Pm
    Pf = 0.5 * (Pm[:, 1:] + Pm[:, :-1])
    af = 0.5 * (a[:, 1:] + a[:, :-1])
    bf = 0.5 * (b[:, 1:] + b[:, :-1])
    # total flux = b P + sigma u P - 1/2 d(aP)/dx
    J = G + 0.5 * (aP[:, 1:] - aP[:, :-1]) / h - bf * Pf
    keep = Pf > p_floor * Pf.max(axis=1, keepdims=True)
    kin = np.where(keep, 0.5 * J ** 2 / (af * np.where(keep, Pf, 1.0)), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(V > 0, kill / V, 1.0)
    ent = entropy_integrand(alpha) * V * Pm
    return CostReport(float(dt * h * kin.sum()), float(dt * h * ent.sum()))


def perturbation_check(sol: BridgeSolution, spec: KilledDiffusionSpec, grid: SpaceGrid,
                       tm: TimeMesh, n_trials: int = 5, amplitude: float = 0.1,
                       seed: int = 0, t_max: float = 0.95
                       ) -> tuple[CostReport, list[CostReport]]:
    """Local optimality spot check on the killing ratio.

    Keeps the flow ``P``, multiplies ``alpha`` by ``exp(amplitude * xi(x))``
    for random smooth ``xi`` with sup-norm 1 on steps ending before
    ``t_max``, restores feasibility by the per-step mass-matching scaling and
    recomputes the drift from the flux.  Because the scaling closes the mass
    balance step by step, perturbations confined to a time window are
    admissible on their own; the window keeps them off the terminal layer,
    where ``phi`` is steep and the flux route's own discretization error is
    comparable to the second-order cost increase.

    Returns the unperturbed reference cost (same route) and the perturbed ones.
    """
    if sol.potentials.psi <= 0:
        raise ValueError("perturbation check needs a positive coffin potential")
    tmid = tm.times[:-1] + 0.5 * tm.dt
    _, _, Vmid = _fields(spec, grid, tmid)
    kill = sol.posterior_killing
    kill_mid = 0.5 * (kill[1:] + kill[:-1])
    ref = flux_route_cost(sol.marginal_P, kill_mid, spec, grid, tm, Vmid)
    on = (tm.times[1:] <= t_max + 1e-12).astype(float)
    rng = np.random.default_rng(seed)
    x = (grid.nodes - grid.domain_lo) / (grid.domain_hi - grid.domain_lo)
    out = []
    for _ in range(n_trials):
        coef = rng.standard_normal(4)
        xi = sum(c * np.cos((j + 1) * np.pi * x + rng.uniform(0, 2 * np.pi))
                 for j, c in enumerate(coef))
        xi /= np.max(np.abs(xi))
        bump = np.exp(amplitude * xi)[None, :] ** on[:, None]
        out.append(flux_route_cost(sol.marginal_P, kill_mid * bump, spec, grid, tm, Vmid))
    return ref, out


# ------------------------------------------------------------ residuals

@dataclass
class ResidualReport:
    fp_residual_norm: float
    hjb_residual_norm: float
    levels: list = field(default_factory=list)


def _interior_support(P):
    on = P > 0
    return on[1:-1, 1:-1] & on[1:-1, :-2] & on[1:-1, 2:] & on[:-2, 1:-1] & on[2:, 1:-1]


def fp_residual(sol: BridgeSolution, spec: KilledDiffusionSpec, grid: SpaceGrid,
                tm: TimeMesh) -> float:
    """Discrete L2 norm of the posterior Fokker-Planck residual.

    ``dP/dt + d/dx((b + a dlog(phi)/dx) P) - 1/2 d2(aP)/dx2 + (psi/phi) V P``,
    central differences at interior space-time nodes.
    """
    b, a, V = _fields(spec, grid, tm.times)
    P = sol.marginal_P
    phi = sol.potentials.phi
    h, dt = grid.h, tm.dt
    with np.errstate(divide="ignore", invalid="ignore"):
        logphi = np.log(phi)
        v = b[:, 1:-1] + a[:, 1:-1] * (logphi[:, 2:] - logphi[:, :-2]) / (2 * h)
        kill = np.where(phi > 0, sol.potentials.psi * V / phi, 0.0)
    vP = np.zeros_like(P)
    vP[:, 1:-1] = v * P[:, 1:-1]
    aP = a * P
    # the flux derivative uses vP at i +- 1, so stay one more cell inside
    R = ((P[2:, 2:-2] - P[:-2, 2:-2]) / (2 * dt)
         + ((vP[:, 3:-1] - vP[:, 1:-3]) / (2 * h)
            - 0.5 * (aP[:, 3:-1] - 2 * aP[:, 2:-2] + aP[:, 1:-3]) / h ** 2
            + kill[:, 2:-2] * P[:, 2:-2])[1:-1])
    R = np.where(_interior_support(P)[:, 1:-1], R, 0.0)
    return float(np.sqrt(h * dt * np.sum(R ** 2)))


def _hjb_field(lam, b, a, V, h, dt, with_killing=True):
    dl = (lam[:, 2:] - lam[:, :-2]) / (2 * h)
    d2 = (lam[:, 2:] - 2 * lam[:, 1:-1] + lam[:, :-2]) / h ** 2
    R = b[:, 1:-1] * dl + 0.5 * a[:, 1:-1] * (d2 + dl ** 2)
    if with_killing:
        R = R - V[:, 1:-1] * (1.0 - np.exp(-lam[:, 1:-1]))
    return (lam[2:, 1:-1] - lam[:-2, 1:-1]) / (2 * dt) + R[1:-1]


def _weighted_norm(R, W) -> float:
    return float(np.sqrt(np.sum(W * R ** 2) / np.sum(W)))


def hjb_residual(sol: BridgeSolution, spec: KilledDiffusionSpec, grid: SpaceGrid,
                 tm: TimeMesh) -> float:
    """P-weighted L2 norm of the HJB residual for ``lambda = log(phi / psi)``."""
    psi = sol.potentials.psi
    if psi <= 0:
        raise ValueError("lambda undefined (psi=0); use balanced_hjb_residual")
    P = sol.marginal_P
    phi = sol.potentials.phi
    inner = _interior_support(P)
    if np.any(phi[P > 0] <= 0):
        raise ValueError("phi vanishes on the support of P")
    b, a, V = _fields(spec, grid, tm.times)
    with np.errstate(divide="ignore"):
        lam = np.log(phi) - np.log(psi)
    lam = np.where(np.isfinite(lam), lam, 0.0)
    R = _hjb_field(lam, b, a, V, grid.h, tm.dt)
    W = np.where(inner, P[1:-1, 1:-1], 0.0)
    return _weighted_norm(np.where(inner, R, 0.0), W)


def balanced_hjb_residual(phi, spec: KilledDiffusionSpec, grid: SpaceGrid, tm: TimeMesh,
                          weight=None) -> float:
    """Residual of ``dl/dt + b dl/dx + a/2 (d2l/dx2 + (dl/dx)^2) = 0`` for
    ``l = log(phi)``, the branch without a coffin potential."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (tm.n_steps + 1, grid.n_cells):
        raise ValueError("phi must have shape (n_steps + 1, n_cells)")
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    b, a, V = _fields(spec, grid, tm.times)
    R = _hjb_field(np.log(phi), b, a, V, grid.h, tm.dt, with_killing=False)
    W = np.ones_like(R) if weight is None else np.asarray(weight, dtype=float)[1:-1, 1:-1]
    return _weighted_norm(R, W)


def residual_report(sol: BridgeSolution, spec: KilledDiffusionSpec, grid: SpaceGrid,
                    tm: TimeMesh) -> ResidualReport:
    fp = fp_residual(sol, spec, grid, tm)
    hj = hjb_residual(sol, spec, grid, tm) if sol.potentials.psi > 0 else float("nan")
    return ResidualReport(fp, hj, [(grid.n_cells, tm.n_steps)])


def refinement_study(build_and_solve, levels=((256, 400), (512, 800), (1024, 1600))):
    """Residual norms over successively refined meshes.

    ``build_and_solve(n_cells, n_steps)`` must return ``(sol, spec, grid, tm)``.
    Returns the per-level reports and the per-step reduction factors
    ``(fp_factors, hjb_factors)``.
    """
    reports = []
    for n, m in levels:
        sol, spec, grid, tm = build_and_solve(n, m)
        reports.append(residual_report(sol, spec, grid, tm))
    fp = [r0.fp_residual_norm / r1.fp_residual_norm for r0, r1 in zip(reports, reports[1:])]
    hj = [r0.hjb_residual_norm / r1.hjb_residual_norm for r0, r1 in zip(reports, reports[1:])]
    return reports, fp, hj


# ---------------------------------------------------------- Monte Carlo

@dataclass
class ParticleEnsemble:
    """Recorded particle positions; NaN marks particles already killed.

    ``positions[m]`` is the snapshot at coarse step ``record_steps[m]`` and
    ``death_step[p]`` the step at whose start particle p died (-1: survived).
    """

    n_particles: int
    seed: int
    record_steps: np.ndarray
    positions: np.ndarray
    death_step: np.ndarray
    tm: TimeMesh

    def alive(self, m: int | None = None) -> np.ndarray:
        if m is None:
            return self.death_step < 0
        return ~np.isnan(self.positions[m])

    def alive_fraction(self, m: int = -1) -> float:
        return float(np.mean(self.alive(m)))

    def alive_history(self) -> np.ndarray:
        """Boolean ``(n_steps + 1, n_particles)`` table of alive flags."""
        steps = np.arange(self.tm.n_steps + 1)[:, None]
        d = self.death_step[None, :]
        return (d < 0) | (steps < d)

    def snapshot_index(self, step: int) -> int:
        hits = np.flatnonzero(self.record_steps == step)
        if hits.size == 0:
            raise KeyError(f"step {step} was not recorded")
        return int(hits[0])


def particle_keys(seed: int, n_particles: int) -> np.ndarray:
    """One 64-bit stream key per particle, a function of (seed, index) only."""
    p = np.arange(1, n_particles + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(_GOLDEN) * p)


def sample_initial(rho0, grid: SpaceGrid, keys) -> np.ndarray:
    """Inverse-CDF draw from the piecewise-constant density ``rho0``."""
    rho0 = np.asarray(rho0, dtype=float)
    cdf = np.concatenate([[0.0], np.cumsum(rho0)])
    cdf /= cdf[-1]
    u = _uniform(np.asarray(keys, dtype=np.uint64), 0, 3)
    j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, grid.n_cells - 1)
    width = cdf[j + 1] - cdf[j]
    frac = np.where(width > 0, (u - cdf[j]) / np.where(width > 0, width, 1.0), 0.5)
    return grid.domain_lo + (j + np.clip(frac, 0.0, 1.0)) * grid.h


def _simulate(rho0, grid, tm, drift, sigma, kill, n_particles, seed, record_steps, backend):
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if record_steps is None:
        record_steps = np.arange(tm.n_steps + 1)
    # the compiled loop walks snapshots in order
    record_steps = np.unique(np.asarray(record_steps, dtype=np.int64))
    if record_steps[0] < 0 or record_steps[-1] > tm.n_steps:
        raise ValueError("record steps must lie in [0, n_steps]")
    keys = particle_keys(seed, n_particles)
    x0 = sample_initial(rho0, grid, keys)
    kern = get_kernels(backend)
    pos, death = kern.simulate_particles(
        x0, keys, np.ascontiguousarray(drift), np.ascontiguousarray(sigma),
        np.ascontiguousarray(kill), grid.domain_lo, grid.domain_hi, tm.dt, record_steps)
    return ParticleEnsemble(n_particles, seed, record_steps, pos, death, tm)


def _step_fields(spec, grid, tm):
    tmid = tm.times[:-1] + 0.5 * tm.dt
    b, a, V = _fields(spec, grid, tmid)
    sig = np.stack([spec.diffusion(t, grid.nodes) for t in tmid])
    return b, sig, V


def simulate_prior(spec: KilledDiffusionSpec, rho0, n_particles: int, seed: int, tm: TimeMesh,
                   grid: SpaceGrid, record_steps=None, backend: str | None = None
                   ) -> ParticleEnsemble:
    """Euler-Maruyama particles of the killed prior, reflected at the walls.

    Coefficients are frozen at each step's midpoint time.
    """
    b, sig, V = _step_fields(spec, grid, tm)
    return _simulate(rho0, grid, tm, b, sig, V, n_particles, seed, record_steps, backend)


def simulate_posterior(sol: BridgeSolution, spec: KilledDiffusionSpec, rho0, n_particles: int,
                       seed: int, tm: TimeMesh, grid: SpaceGrid, record_steps=None,
                       backend: str | None = None) -> ParticleEnsemble:
    """Particles of the bridge: drift ``b + a dlog(phi)/dx``, killing ``psi V / phi``.

    Fields are averaged over the two ends of each step and held constant on it.
    """
    b, sig, _ = _step_fields(spec, grid, tm)
    dc = sol.drift_correction
    kill = sol.posterior_killing
    drift = b + 0.5 * (dc[1:] + dc[:-1])
    kill_step = 0.5 * (kill[1:] + kill[:-1])
    return _simulate(rho0, grid, tm, drift, sig, kill_step, n_particles, seed, record_steps,
                     backend)


def aggregate(p, bins: int) -> np.ndarray:
    """Sum consecutive groups of cells into ``bins`` coarse bins."""
    p = np.asarray(p, dtype=float)
    if p.size % bins:
        raise ValueError(f"{p.size} cells do not split evenly into {bins} bins")
    return p.reshape(bins, -1).sum(axis=1)


def tv_distance(positions, density, grid: SpaceGrid, bins: int = 64) -> float:
    """Total variation between the surviving particles' histogram and ``density``.

    Both are normalized to probabilities and compared on ``bins`` equal bins.
    """
    x = np.asarray(positions, dtype=float)
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("no surviving particles")
    bins = min(bins, grid.n_cells)
    counts, _ = np.histogram(x, bins=bins, range=(grid.domain_lo, grid.domain_hi))
    emp = counts / x.size
    ref = aggregate(density, bins)
    ref = ref / ref.sum()
    return float(0.5 * np.abs(emp - ref).sum())
