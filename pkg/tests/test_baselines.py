from __future__ import annotations

import numpy as np
import pytest

from usbridge.baselines import relative_entropy, solve_classic, solve_reweighted, static_oracle
from usbridge.diffusion_kernels import KilledDiffusionSpec, build_kernel_bundle
from usbridge.grid import SpaceGrid, TimeMesh
from usbridge.usbp import ConvergenceError, ProblemInstance, SupportError, prior_joint, solve

from conftest import consistent_instance


def brute_sinkhorn(M, a, b, iters=20000):
    """Textbook matrix scaling of ``M`` to row sums ``a`` and column sums ``b``."""
    u = np.ones(len(a))
    v = np.ones(len(b))
    for _ in range(iters):
        u = a / (M @ v)
        v = b / (M.T @ u)
    return u[:, None] * M * v[None, :]


def ipf(Q, p0, p1, iters=5000):
    Q = Q.copy()
    for _ in range(iters):
        rows = Q.sum(axis=1)
        Q *= np.where(rows > 0, p0 / np.where(rows > 0, rows, 1), 0)[:, None]
        cols = Q.sum(axis=0)
        Q *= np.where(cols > 0, p1 / np.where(cols > 0, cols, 1), 0)[None, :]
    return Q


# ------------------------------------------------------------ classic

def test_classic_on_consistent_marginals_is_the_prior(free_bundle, bench_instances):
    rho0 = bench_instances[1.0].rho0
    rho1 = free_bundle.K.T @ rho0
    cb = solve_classic(rho0, rho1, free_bundle)
    phi = cb.phi
    assert np.max(phi) / np.min(phi) - 1 < 1e-8
    dc = cb.drift_correction(0.05 ** 2, free_bundle.grid.h)
    assert np.max(np.abs(dc)) < 1e-8


def test_classic_symmetric_instance(free_bundle, bench_instances):
    inst = bench_instances[1.0]
    cb = solve_classic(inst.rho0, inst.rho1, free_bundle)
    mid = cb.marginal_P[inst.tm.n_steps // 2]
    assert np.max(np.abs(mid - mid[::-1])) < 1e-6
    np.testing.assert_allclose(cb.total_mass(inst.grid.h), 1.0, atol=1e-9)


def test_classic_three_cells_matches_matrix_scaling():
    grid = SpaceGrid(0.0, 1.0, 3)
    B = build_kernel_bundle(KilledDiffusionSpec(b=0.0, sigma=0.4, V=0.0), grid, TimeMesh(20))
    h = grid.h
    rho0 = np.array([0.5, 1.0, 1.5])
    rho1 = np.array([1.8, 0.9, 0.3])
    cb = solve_classic(rho0, rho1, B, tol=1e-14)
    pi = h * cb.phi_hat[0][:, None] * B.K * cb.phi[-1][None, :]
    oracle = brute_sinkhorn(B.K, h * rho0, h * rho1)
    np.testing.assert_allclose(pi, oracle, atol=1e-8)


def test_classic_needs_unit_mass(free_bundle, bench_instances):
    with pytest.raises(ValueError, match="unit mass"):
        solve_classic(bench_instances[1.0].rho0, bench_instances[0.6].rho1, free_bundle)


def test_classic_reports_disconnected_support():
    grid = SpaceGrid(0.0, 1.0, 4)
    B = build_kernel_bundle(KilledDiffusionSpec(sigma=0.3), grid, TimeMesh(4))
    rho = np.array([4.0, 0.0, 0.0, 0.0])

    class Cut:
        K = np.eye(4)
        grid = B.grid

    with pytest.raises(SupportError):
        solve_classic(rho, rho[::-1], Cut)


def test_classic_iteration_limit(free_bundle, bench_instances):
    inst = bench_instances[1.0]
    with pytest.raises(ConvergenceError):
        solve_classic(inst.rho0, inst.rho1, free_bundle, max_iter=2)


# --------------------------------------------------------- reweighted

def test_reweighted_flow_is_independent_of_s(bench_instances, bench_bundle):
    flows = [solve_reweighted(bench_instances[s].rho0, bench_instances[s].rho1, bench_bundle)
             for s in (0.8, 0.6, 0.4)]
    for f in flows[1:]:
        assert np.max(np.abs(f.marginal_P - flows[0].marginal_P)) < 1e-8


def test_reweighted_flow_is_a_probability(bench_instances, bench_bundle):
    inst = bench_instances[0.4]
    rw = solve_reweighted(inst.rho0, inst.rho1, bench_bundle)
    np.testing.assert_allclose(rw.total_mass(inst.grid.h), 1.0, atol=1e-9)
    np.testing.assert_allclose(rw.rho1_normalized, inst.rho1 / 0.4, rtol=1e-12)


def test_reweighted_equals_usbp_when_nothing_dies(bench_instances, bench_bundle, bench_solutions):
    inst = bench_instances[1.0]
    rw = solve_reweighted(inst.rho0, inst.rho1, bench_bundle)
    assert np.max(np.abs(rw.marginal_P - bench_solutions[1.0].marginal_P)) < 1e-6


def test_reweighted_moves_away_from_consistent_prior(consistent_case):
    inst, bundle = consistent_case
    rw = solve_reweighted(inst.rho0, inst.rho1, bundle)
    dc = rw.drift_correction(0.05 ** 2, inst.grid.h)
    assert np.max(np.abs(dc[rw.marginal_P > 0])) > 1e-3
    sol = solve(inst, bundle)
    assert np.max(np.abs(sol.drift_correction)) < 1e-6


def test_constant_killing_reweighting_is_invisible():
    # with V constant the path weight is a constant, so reweighting changes nothing
    inst, bundle = consistent_instance(V=1.0)
    rw = solve_reweighted(inst.rho0, inst.rho1, bundle)
    dc = rw.drift_correction(0.05 ** 2, inst.grid.h)
    assert np.max(np.abs(dc)) < 1e-8


# ------------------------------------------------------------- oracle

@pytest.fixture(scope="module")
def oracle16():
    inst = ProblemInstance.benchmark(0.6, n_cells=16, n_steps=100)
    bundle = build_kernel_bundle(inst.spec, inst.grid, inst.tm)
    return inst, bundle, static_oracle(inst, bundle)


def test_oracle_on_feasible_prior_is_the_prior():
    inst, bundle = consistent_instance(n_cells=16, n_steps=50)
    res = static_oracle(inst, bundle)
    np.testing.assert_allclose(res.pi, prior_joint(inst.rho0, bundle), atol=1e-12)
    assert res.entropy == pytest.approx(0.0, abs=1e-12)


def test_dynamic_solution_matches_oracle(oracle16):
    inst, bundle, res = oracle16
    sol = solve(inst, bundle, tol=1e-12)
    assert np.max(np.abs(sol.static_coupling(inst, bundle) - res.pi)) < 1e-7


def test_oracle_marginals(oracle16):
    inst, _, res = oracle16
    h = inst.grid.h
    assert res.pi[:, -1].sum() == pytest.approx(inst.c1, abs=1e-10)
    np.testing.assert_allclose(res.pi.sum(axis=1)[:-1], h * inst.rho0, atol=1e-10)
    np.testing.assert_allclose(res.pi.sum(axis=0)[:-1], h * inst.rho1, atol=1e-10)
    assert np.all(res.pi >= 0)
    assert np.all(res.pi[res.R == 0] == 0)


def test_oracle_has_product_form(oracle16):
    _, _, res = oracle16
    D = res.row_scaling[:, None] * res.R * res.col_scaling[None, :]
    np.testing.assert_allclose(res.pi, D, atol=1e-8)


def test_oracle_minimizes_entropy(oracle16):
    inst, _, res = oracle16
    rng = np.random.default_rng(3)
    p0 = res.pi.sum(axis=1)
    p1 = res.pi.sum(axis=0)
    for _ in range(20):
        noise = np.exp(rng.normal(scale=0.5, size=res.pi.shape))
        Q = ipf(res.pi * noise, p0, p1)
        assert np.max(np.abs(Q.sum(axis=0) - p1)) < 1e-9
        assert res.entropy <= relative_entropy(Q, res.R) + 1e-8


def test_oracle_limits():
    inst = ProblemInstance.benchmark(0.6, n_cells=65, n_steps=10)
    with pytest.raises(ValueError, match="64"):
        static_oracle(inst, None)
    inst = ProblemInstance.benchmark(0.6, n_cells=16, n_steps=20)
    free = build_kernel_bundle(KilledDiffusionSpec(sigma=0.05), inst.grid, inst.tm)
    with pytest.raises(ValueError, match="infeasible"):
        static_oracle(inst, free)


def test_relative_entropy_domination():
    R = np.array([[1.0, 0.0], [0.5, 0.5]])
    assert relative_entropy(np.array([[0.5, 0.1], [0.2, 0.2]]), R) == np.inf
    assert relative_entropy(R, R) == 0.0
