"""Compiled vs pure-Python kernels on the benchmark mesh.

    python3 benchmarks/bench_kernels.py [--n-cells 256] [--n-steps 400] [--particles 20000]

Times the kernel-bundle build (impulse sweep), one backward sweep with a
coffin source, and a posterior particle run, and reports how far the two
backends' outputs drift apart.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from usbridge._backend import compiled_available
from usbridge.diffusion_kernels import build_kernel_bundle, propagate_backward
from usbridge.usbp import ProblemInstance, solve
from usbridge.validation import simulate_posterior


def timed(fn, repeat=1):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-cells", type=int, default=256)
    ap.add_argument("--n-steps", type=int, default=400)
    ap.add_argument("--particles", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")

    inst = ProblemInstance.benchmark(0.6, args.n_cells, args.n_steps)
    rows = []
    bundles = {}
    for name in ("cython", "python"):
        t, b = timed(lambda: build_kernel_bundle(inst.spec, inst.grid, inst.tm, backend=name),
                     args.repeat)
        bundles[name] = b
        rows.append(("bundle build", name, t))

    sol = solve(inst, bundles["cython"])
    phi1 = sol.potentials.phi[-1]
    psi = sol.potentials.psi
    back = {}
    for name, b in bundles.items():
        t, back[name] = timed(lambda: propagate_backward(b, phi1, psi), args.repeat)
        rows.append(("backward sweep", name, t))

    alive = {}
    for name in ("cython", "python"):
        t, ens = timed(lambda: simulate_posterior(sol, inst.spec, inst.rho0, args.particles, 7,
                                                  inst.tm, inst.grid, record_steps=[inst.tm.n_steps],
                                                  backend=name))
        alive[name] = ens.positions[-1]
        rows.append(("particles", name, t))

    print(f"mesh {args.n_cells} cells x {args.n_steps} steps, {args.particles} particles")
    print(f"{'kernel':<16}{'backend':<9}{'seconds':>10}")
    for kernel, name, t in rows:
        print(f"{kernel:<16}{name:<9}{t:>10.4f}")
    for kernel in ("bundle build", "backward sweep", "particles"):
        tc = next(t for k, n, t in rows if k == kernel and n == "cython")
        tp = next(t for k, n, t in rows if k == kernel and n == "python")
        print(f"speedup {kernel}: {tp / tc:.1f}x")
    print("max |K_cython - K_python|     %.3e" % np.max(np.abs(bundles["cython"].K - bundles["python"].K)))
    rel = np.max(np.abs(back["cython"] - back["python"]) / back["cython"])
    print("max relative phi gap          %.3e" % rel)
    same = np.array_equal(np.isnan(alive["cython"]), np.isnan(alive["python"]))
    gap = np.nanmax(np.abs(alive["cython"] - alive["python"]))
    print(f"particles: identical deaths {same}, max position gap {gap:.3e}")


if __name__ == "__main__":
    main()
