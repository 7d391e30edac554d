from __future__ import annotations

import numpy as np
import pytest

from usbridge import baselines
from usbridge.diffusion_kernels import KilledDiffusionSpec, build_kernel_bundle
from usbridge.grid import SpaceGrid, TimeMesh
from usbridge.hilbert import hilbert_distance
from usbridge.usbp import (ConvergenceError, EndpointState, PotentialQuadruple, ProblemInstance,
                           SupportError, assemble_posterior, composed_map, fixed_point_eigenvalue,
                           initial_state, iterate_once, prior_joint, solve, state_mask)

from conftest import S_LIST


def toy3(s=0.7):
    grid = SpaceGrid(0.0, 1.0, 3)
    tm = TimeMesh(20)
    spec = KilledDiffusionSpec(b=0.1, sigma=0.3, V=lambda t, x: 1.0 + x)
    rho0 = np.array([0.5, 1.0, 1.5])
    rho1 = s * np.array([1.5, 1.0, 0.5])
    inst = ProblemInstance(spec, grid, tm, rho0, rho1, s=s)
    return inst, build_kernel_bundle(spec, grid, tm)


# ------------------------------------------------------------- instance

def test_instance_coffin_mass(bench_instances):
    for s, inst in bench_instances.items():
        assert inst.c1 == pytest.approx(1 - s, abs=1e-10)
        assert 0 <= inst.c1 < 1


def test_instance_validation():
    grid, tm, spec = SpaceGrid(0, 1, 4), TimeMesh(4), KilledDiffusionSpec(sigma=0.2, V=1.0)
    with pytest.raises(ValueError, match="unit mass"):
        ProblemInstance(spec, grid, tm, np.full(4, 2.0), np.ones(4))
    with pytest.raises(ValueError):
        ProblemInstance(spec, grid, tm, np.ones(4), np.full(4, 2.0))
    with pytest.raises(ValueError):
        ProblemInstance(spec, grid, tm, np.ones(4), np.array([1.0, -1.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        ProblemInstance.benchmark(1.5)


# ------------------------------------------------------------ iteration

def test_consistent_marginals_are_a_fixed_point(consistent_case):
    inst, bundle = consistent_case
    assert inst.c1 == pytest.approx(inst.grid.h * bundle.r @ inst.rho0, abs=1e-12)
    state = initial_state(inst, bundle)
    new = iterate_once(state, inst, bundle).state
    np.testing.assert_allclose(new.phi_hat1, state.phi_hat1, atol=1e-8)
    assert new.psi_hat1 == pytest.approx(state.psi_hat1, abs=1e-8)


def test_balanced_case_matches_classic_bridge(bench_solutions, bench_instances, free_bundle):
    inst = bench_instances[1.0]
    sol = bench_solutions[1.0]
    assert sol.potentials.psi == 0.0
    cb = baselines.solve_classic(inst.rho0, inst.rho1, free_bundle)
    assert np.max(np.abs(sol.marginal_P - cb.marginal_P)) < 1e-6


def test_converged_state_is_stationary(bench_instances, bench_bundle):
    for s in (0.6, 1.0):
        inst = bench_instances[s]
        sol = solve(inst, bench_bundle, tol=1e-13)
        new = iterate_once(sol.final_state, inst, bench_bundle).state
        d = hilbert_distance(new.stacked(), sol.final_state.stacked(), state_mask(inst))
        assert d < 1e-10


def test_modified_coffin_step_gives_same_image(bench_solutions, bench_instances, bench_bundle):
    inst = bench_instances[0.6]
    state = initial_state(inst, bench_bundle)
    for _ in range(3):
        a = iterate_once(state, inst, bench_bundle, normalize=False)
        b = iterate_once(state, inst, bench_bundle, modified=True, normalize=False)
        assert a.psi0 != b.psi0
        np.testing.assert_array_equal(a.state.stacked(), b.state.stacked())
        state = a.state


def test_disconnected_support_is_reported(small_case):
    inst, bundle = small_case
    state = EndpointState(np.zeros(inst.grid.n_cells), 1.0)
    with pytest.raises(SupportError, match="does not connect"):
        iterate_once(state, inst, bundle)


# ---------------------------------------------------------------- solve

def test_terminal_masses(bench_solutions):
    sol = bench_solutions[0.6]
    assert sol.coffin_mass[-1] == pytest.approx(0.4, abs=1e-6)
    assert sol.surviving_mass[-1] == pytest.approx(0.6, abs=1e-6)


def test_balanced_case_never_kills(bench_solutions):
    sol = bench_solutions[1.0]
    np.testing.assert_array_equal(sol.posterior_killing, 0.0)
    np.testing.assert_array_equal(sol.coffin_mass, 0.0)


@pytest.mark.parametrize("s", S_LIST)
def test_solution_invariants(bench_solutions, s):
    sol = bench_solutions[s]
    assert np.min(sol.marginal_P) >= 0
    assert sol.surviving_mass[0] == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(sol.surviving_mass + sol.coffin_mass, 1.0, atol=1e-5)
    assert np.all(np.diff(sol.coffin_mass) >= -1e-12)
    assert np.all(np.diff(sol.surviving_mass) <= 1e-12)
    q = sol.potentials
    assert q.psi_hat[0] == 0.0
    assert np.all(np.diff(q.psi_hat) >= 0)
    assert sol.hilbert_report.fitted_ratio() < 1


def test_three_cell_toy_matches_static_oracle():
    inst, bundle = toy3()
    sol = solve(inst, bundle, tol=1e-13)
    oracle = baselines.static_oracle(inst, bundle)
    np.testing.assert_allclose(sol.static_coupling(inst, bundle), oracle.pi, atol=1e-7)


def test_static_factors_reproduce_marginals():
    inst, bundle = toy3(0.5)
    sol = solve(inst, bundle, tol=1e-13)
    pi = sol.static_coupling(inst, bundle)
    h = inst.grid.h
    np.testing.assert_allclose(pi.sum(axis=1), np.append(h * inst.rho0, 0.0), atol=1e-10)
    np.testing.assert_allclose(pi.sum(axis=0), np.append(h * inst.rho1, inst.c1), atol=1e-10)
    fac = sol.static_factors(inst.rho0)
    assert np.all(fac.f.stacked() >= 0) and np.all(fac.g.stacked() >= 0)
    R = prior_joint(inst.rho0, bundle)
    assert R[-1].sum() == 0.0


def test_iteration_limit_raises(small_case):
    inst, bundle = small_case
    with pytest.raises(ConvergenceError) as err:
        solve(inst, bundle, max_iter=3)
    assert err.value.last_distance > 0


def test_mesh_mismatch_is_rejected(small_case, bench_bundle):
    inst, _ = small_case
    with pytest.raises(ValueError):
        solve(inst, bench_bundle)


def test_gauge_freedom(small_case):
    inst, bundle = small_case
    a = solve(inst, bundle, tol=1e-12)
    for lam in (1e-3, 5.0, 1e4):
        b = solve(inst, bundle, tol=1e-12, init_scale=lam)
        for name in ("marginal_P", "posterior_killing", "drift_correction", "coffin_mass"):
            np.testing.assert_allclose(getattr(b, name), getattr(a, name), atol=1e-8)


# ------------------------------------------------------------- posterior

def test_constant_phi_has_no_drift_correction(small_case):
    inst, _ = small_case
    n1 = inst.tm.n_steps + 1
    qd = PotentialQuadruple(np.ones((n1, 64)), np.linspace(0, 1, n1), np.full((n1, 64), 3.0), 0.5)
    fields = assemble_posterior(qd, inst.spec, inst.grid, inst.tm)
    np.testing.assert_array_equal(fields["drift_correction"], 0.0)
    np.testing.assert_allclose(fields["posterior_killing"], 0.5 / 3.0)


def test_vanishing_phi_under_mass_is_an_error(small_case):
    inst, _ = small_case
    n1 = inst.tm.n_steps + 1
    phi = np.ones((n1, 64))
    phi[3, 10] = 0.0
    qd = PotentialQuadruple(np.ones((n1, 64)), np.zeros(n1), phi, 0.0)
    with pytest.raises(SupportError):
        assemble_posterior(qd, inst.spec, inst.grid, inst.tm)


def test_coffin_rate_equals_posterior_killing_flux(bench_solutions, bench_instances):
    sol = bench_solutions[0.4]
    tm, h = bench_instances[0.4].tm, bench_instances[0.4].grid.h
    rate = h * (sol.posterior_killing * sol.marginal_P).sum(axis=1)
    dq = np.diff(sol.coffin_mass) / tm.dt
    assert np.max(np.abs(dq - 0.5 * (rate[1:] + rate[:-1]))) < tm.dt


# ------------------------------------------------------------ eigenvalue

@pytest.mark.parametrize("s", S_LIST)
def test_fixed_point_eigenvalue(bench_solutions, bench_instances, bench_bundle, s):
    rep = fixed_point_eigenvalue(bench_solutions[s].final_state, bench_instances[s], bench_bundle)
    assert rep.ratio == pytest.approx(1.0, abs=1e-6)
    assert rep.spread < 1e-6
    assert rep.pairing == pytest.approx(1.0, abs=1e-6)


def test_unconverged_state_has_spread(bench_instances, bench_bundle):
    inst = bench_instances[0.6]
    state = iterate_once(initial_state(inst, bench_bundle), inst, bench_bundle).state
    assert fixed_point_eigenvalue(state, inst, bench_bundle).spread > 1e-6


def test_consistent_instance_eigenvalue(consistent_case):
    inst, bundle = consistent_case
    rep = fixed_point_eigenvalue(initial_state(inst, bundle, normalize=False), inst, bundle)
    assert rep.ratio == pytest.approx(1.0, abs=1e-8)
    assert rep.spread < 1e-8


def test_composed_map_matches_iteration(bench_instances, bench_bundle):
    inst = bench_instances[0.8]
    state = initial_state(inst, bench_bundle, normalize=False)
    nxt = iterate_once(state, inst, bench_bundle, normalize=False).state
    np.testing.assert_allclose(composed_map(state.stacked(), inst, bench_bundle), nxt.stacked(),
                               rtol=1e-12)
