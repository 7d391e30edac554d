"""Regenerate the self-referential regression baselines.

These lock this package's own converged outputs on a coarse mesh. They are
not external reference values; rerun only after an intended numerical change.
"""
from __future__ import annotations

import json
from pathlib import Path

from usbridge.diffusion_kernels import build_kernel_bundle
from usbridge.usbp import ProblemInstance, solve

MESH = (64, 100)
S_VALUES = (1.0, 0.6)


def compute() -> dict:
    out = {"mesh": list(MESH), "tol": 1e-12, "runs": {}}
    for s in S_VALUES:
        inst = ProblemInstance.benchmark(s, *MESH)
        sol = solve(inst, build_kernel_bundle(inst.spec, inst.grid, inst.tm), tol=1e-12)
        mid = inst.tm.n_steps // 2
        out["runs"][f"{s:g}"] = {
            "surviving_mass": sol.surviving_mass[::10].tolist(),
            "marginal_mid": sol.marginal_P[mid].tolist(),
            "drift_correction_mid": sol.drift_correction[mid].tolist(),
            "posterior_killing_mid": sol.posterior_killing[mid].tolist(),
        }
    return out


if __name__ == "__main__":
    path = Path(__file__).with_name("benchmark_64x100.json")
    path.write_text(json.dumps(compute(), indent=1) + "\n")
    print(f"wrote {path}")
