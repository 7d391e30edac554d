from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from usbridge import validation as val
from usbridge._backend import BACKEND, compiled_available, get_kernels
from usbridge.diffusion_kernels import KilledDiffusionSpec, build_kernel_bundle, propagate_backward
from usbridge.grid import SpaceGrid, TimeMesh
from usbridge.usbp import ProblemInstance, solve

from conftest import cosine_killing

needs_compiled = pytest.mark.skipif(not compiled_available(), reason="compiled kernels not built")


def test_default_backend_is_compiled_when_available():
    assert BACKEND == ("cython" if compiled_available() else "python")
    with pytest.raises(ValueError):
        get_kernels("fortran")


def test_environment_forces_fallback():
    env = {**os.environ, "USBRIDGE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from usbridge._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.fixture(scope="module")
def both():
    grid, tm = SpaceGrid(0.0, 1.0, 70), TimeMesh(3)   # odd sizes, several substeps
    spec = KilledDiffusionSpec(b=lambda t, x: 0.01 * np.sin(5 * x + t), sigma=0.05,
                               V=cosine_killing)
    return {name: build_kernel_bundle(spec, grid, tm, backend=name)
            for name in ("cython", "python") if name == "python" or compiled_available()}


@needs_compiled
def test_bundles_agree(both):
    c, p = both["cython"], both["python"]
    assert c.substeps == p.substeps > 1
    np.testing.assert_allclose(c.K, p.K, rtol=0, atol=1e-14)
    np.testing.assert_allclose(c.r, p.r, rtol=0, atol=1e-14)


@needs_compiled
def test_step_operators_agree(both):
    c, p = both["cython"], both["python"]
    for k in range(3):
        np.testing.assert_allclose(c.forward_matrix(k), p.forward_matrix(k), atol=1e-14)
        np.testing.assert_allclose(c.backward_matrix(k), p.backward_matrix(k), atol=1e-14)
    phi1 = np.linspace(0.5, 2.0, 70)
    np.testing.assert_allclose(propagate_backward(c, phi1, 0.7), propagate_backward(p, phi1, 0.7),
                               rtol=1e-13)


@needs_compiled
def test_solutions_agree():
    inst = ProblemInstance.benchmark(0.6, n_cells=48, n_steps=60)
    sols = [solve(inst, build_kernel_bundle(inst.spec, inst.grid, inst.tm, backend=name))
            for name in ("cython", "python")]
    assert sols[0].iterations == sols[1].iterations
    np.testing.assert_allclose(sols[0].marginal_P, sols[1].marginal_P, atol=1e-10)


@needs_compiled
def test_particles_agree(bench_solutions, bench_instances):
    inst = bench_instances[0.6]
    runs = [val.simulate_posterior(bench_solutions[0.6], inst.spec, inst.rho0, 3000, 17, inst.tm,
                                   inst.grid, record_steps=[0, 200, 400], backend=name)
            for name in ("cython", "python")]
    np.testing.assert_array_equal(runs[0].death_step, runs[1].death_step)
    np.testing.assert_allclose(runs[0].positions, runs[1].positions, rtol=0, atol=1e-12)
