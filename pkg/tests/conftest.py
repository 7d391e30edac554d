from __future__ import annotations

import numpy as np
import pytest

from usbridge.diffusion_kernels import KilledDiffusionSpec, build_kernel_bundle
from usbridge.grid import SpaceGrid, TimeMesh
from usbridge.usbp import ProblemInstance, solve

S_LIST = (1.0, 0.8, 0.6, 0.4)

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def bench_instances():
    return {s: ProblemInstance.benchmark(s) for s in S_LIST}


@pytest.fixture(scope="session")
def bench_bundle(bench_instances):
    inst = bench_instances[1.0]
    return build_kernel_bundle(inst.spec, inst.grid, inst.tm)


@pytest.fixture(scope="session")
def free_bundle(bench_instances):
    """Same mesh and diffusion, no killing."""
    inst = bench_instances[1.0]
    spec = KilledDiffusionSpec(b=0.0, sigma=0.05, V=0.0)
    return build_kernel_bundle(spec, inst.grid, inst.tm)


@pytest.fixture(scope="session")
def bench_solutions(bench_instances, bench_bundle):
    return {s: solve(inst, bench_bundle) for s, inst in bench_instances.items()}


@pytest.fixture(scope="session")
def small_case():
    """64 cells, 100 steps, s = 0.6 on the benchmark profile."""
    inst = ProblemInstance.benchmark(0.6, n_cells=64, n_steps=100)
    bundle = build_kernel_bundle(inst.spec, inst.grid, inst.tm)
    return inst, bundle


def cosine_killing(t, x):
    return 1.0 + 0.5 * np.cos(2 * np.pi * np.asarray(x))


def consistent_instance(n_cells=64, n_steps=100, V=cosine_killing):
    """Marginals the prior already satisfies: rho1 is the surviving pushforward."""
    grid = SpaceGrid(0.0, 1.0, n_cells)
    tm = TimeMesh(n_steps)
    spec = KilledDiffusionSpec(b=0.0, sigma=0.05, V=V)
    bundle = build_kernel_bundle(spec, grid, tm)
    rho0 = ProblemInstance.benchmark(1.0, n_cells, n_steps).rho0
    rho1 = bundle.K.T @ rho0
    return ProblemInstance(spec, grid, tm, rho0, rho1), bundle


@pytest.fixture(scope="session")
def consistent_case():
    return consistent_instance()
