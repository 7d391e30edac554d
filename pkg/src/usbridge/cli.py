"""Command-line driver: reproduce the 1-D killed heat-flow experiment.

    usbridge solve|compare|simulate|oracle-check --config cfg.json [--out DIR] [--threads N]

Outputs are CSV (17 significant digits, rows ordered by t then x) plus a
``manifest.json`` listing every file with its sha256.  Files are staged in a
scratch directory and only moved into ``--out`` when the command succeeds.

Exit codes: 0 ok, 2 bad config, 3 solver did not converge, 4 a validation
check failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines, usbp, validation
from ._backend import BACKEND
from .diffusion_kernels import KilledDiffusionSpec, build_kernel_bundle
from .grid import SpaceGrid, TimeMesh, rho0_benchmark, sample_density

logger = logging.getLogger("usbridge")

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_VALIDATION = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class ValidationFailure(RuntimeError):
    pass


# ------------------------------------------------------------------ config

_FIELD_KINDS = ("constant", "cosine", "linear", "tabulated")


def make_field(spec, lo: float, hi: float, name: str):
    """Turn a config field entry into a constant or a callable ``f(t, x)``.

    Accepted forms: a number; ``{"kind": "cosine", "mean", "amplitude",
    "wavenumber"}`` for ``mean + amplitude cos(2 pi k (x - lo) / L)``;
    ``{"kind": "linear", "intercept", "slope"}``; ``{"kind": "tabulated",
    "x": [...], "values": [...]}`` (piecewise linear, held flat outside).
    """
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec)
    if not isinstance(spec, dict) or spec.get("kind") not in _FIELD_KINDS:
        raise ConfigError(f"{name}: expected a number or an object with kind in {_FIELD_KINDS}")
    kind = spec["kind"]
    try:
        if kind == "constant":
            return float(spec["value"])
        if kind == "cosine":
            m, amp, k = float(spec["mean"]), float(spec["amplitude"]), float(spec.get("wavenumber", 1))
            L = hi - lo
            return lambda t, x: m + amp * np.cos(2 * np.pi * k * (np.asarray(x) - lo) / L)
        if kind == "linear":
            c0, c1 = float(spec["intercept"]), float(spec["slope"])
            return lambda t, x: c0 + c1 * np.asarray(x)
        xs = np.asarray(spec["x"], dtype=float)
        vs = np.asarray(spec["values"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: malformed {kind} field ({exc})") from None
    if xs.shape != vs.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
        raise ConfigError(f"{name}: tabulated x must be increasing and match values")
    return lambda t, x: np.interp(x, xs, vs)


@dataclass
class RunConfig:
    domain: tuple[float, float] = (0.0, 1.0)
    n_cells: int = 256
    n_steps: int = 400
    sigma: object = 0.05
    drift: object = 0.0
    killing: object = 1.0
    rho0: object = "paper_sec6"
    rho1: object = "paper_sec6_reflected"
    s_list: list = field(default_factory=lambda: [1.0, 0.8, 0.6, 0.4])
    tol: float = 1e-9
    tol_mass: float = 1e-6
    max_iter: int = 5000
    mc: dict | None = None
    dichotomy: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def grid(self) -> SpaceGrid:
        return SpaceGrid(self.domain[0], self.domain[1], self.n_cells)

    @property
    def tm(self) -> TimeMesh:
        return TimeMesh(self.n_steps)

    def spec(self, killing=None) -> KilledDiffusionSpec:
        lo, hi = self.domain
        V = self.killing if killing is None else killing
        return KilledDiffusionSpec(b=make_field(self.drift, lo, hi, "drift"),
                                   sigma=make_field(self.sigma, lo, hi, "sigma"),
                                   V=make_field(V, lo, hi, "killing"))


_KNOWN_KEYS = {"domain", "n_cells", "n_steps", "sigma", "drift", "killing", "rho0", "rho1",
               "s_list", "tol", "tol_mass", "max_iter", "mc", "dichotomy", "oracle"}


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(raw=raw)
    for key in _KNOWN_KEYS:
        if key in raw:
            setattr(cfg, key, raw[key])
    try:
        cfg.domain = (float(cfg.domain[0]), float(cfg.domain[1]))
        cfg.n_cells = int(cfg.n_cells)
        cfg.n_steps = int(cfg.n_steps)
        cfg.s_list = [float(s) for s in cfg.s_list]
        cfg.tol = float(cfg.tol)
        cfg.tol_mass = float(cfg.tol_mass)
        cfg.max_iter = int(cfg.max_iter)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from None
    if not cfg.domain[1] > cfg.domain[0]:
        raise ConfigError("domain must be [lo, hi] with lo < hi")
    if cfg.n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    if not cfg.s_list or any(not 0 < s <= 1 for s in cfg.s_list):
        raise ConfigError("s_list must be nonempty with every s in (0, 1]")
    for name in ("sigma", "drift", "killing"):
        make_field(getattr(cfg, name), *cfg.domain, name)
    if cfg.dichotomy and "killing" in cfg.dichotomy:
        make_field(cfg.dichotomy["killing"], *cfg.domain, "dichotomy.killing")
    return cfg


def _sample(spec, grid: SpaceGrid, name: str) -> np.ndarray:
    if spec == "paper_sec6":
        return sample_density(rho0_benchmark, grid, total=1.0)
    if isinstance(spec, dict) and "values" in spec:
        vals = np.asarray(spec["values"], dtype=float)
        if vals.shape != (grid.n_cells,):
            raise ConfigError(f"{name}: tabulated values need one entry per cell")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ConfigError(f"{name}: values must be finite and nonnegative")
        return vals
    raise ConfigError(f"{name}: expected 'paper_sec6' or {{'values': [...]}}")


def _label(s: float) -> str:
    return f"{s:g}"


def instances(cfg: RunConfig, n_cells: int | None = None, n_steps: int | None = None,
              require_fine: bool = True) -> list[usbp.ProblemInstance]:
    """One problem instance per entry of ``s_list`` (or one, for tabulated rho1)."""
    n = cfg.n_cells if n_cells is None else n_cells
    grid = SpaceGrid(cfg.domain[0], cfg.domain[1], n)
    tm = TimeMesh(cfg.n_steps if n_steps is None else n_steps)
    if require_fine and n < 16:
        raise ConfigError("experiment commands need n_cells >= 16")
    spec = cfg.spec()
    rho0 = _sample(cfg.rho0, grid, "rho0")
    try:
        if cfg.rho1 == "paper_sec6_reflected":
            if cfg.rho0 == "paper_sec6":
                return [usbp.ProblemInstance(spec, grid, tm, rho0, s * rho0[::-1], s=s)
                        for s in cfg.s_list]
            return [usbp.ProblemInstance(spec, grid, tm, rho0,
                                         s * rho0[::-1] / (grid.h * rho0.sum()), s=s)
                    for s in cfg.s_list]
        rho1 = _sample(cfg.rho1, grid, "rho1")
        return [usbp.ProblemInstance(spec, grid, tm, rho0, rho1, s=float(grid.h * rho1.sum()))]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _bundle(spec, grid, tm, cfg: RunConfig):
    try:
        return build_kernel_bundle(spec, grid, tm, tol_mass=cfg.tol_mass)
    except ValueError as exc:
        raise ConfigError(f"cannot discretize the prior: {exc}") from None


# ------------------------------------------------------------------ output

def _fmt(v) -> str:
    return "%.17g" % v


class OutputWriter:
    """Single writer for one command; stages files until ``commit``."""

    def __init__(self, out_dir: str):
        self.out_dir = os.path.abspath(out_dir)
        parent = os.path.dirname(self.out_dir) or "."
        os.makedirs(parent, exist_ok=True)
        self.stage = tempfile.mkdtemp(prefix=".usbridge-stage-", dir=parent)
        self.files: list[str] = []

    def _path(self, name):
        self.files.append(name)
        return os.path.join(self.stage, name)

    def write_csv(self, name: str, header, columns) -> None:
        cols = [np.asarray(c).ravel() for c in columns]
        lines = [",".join(header)]
        lines.extend(",".join(_fmt(v) for v in row) for row in zip(*cols))
        with open(self._path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_field(self, name: str, tm: TimeMesh, grid: SpaceGrid, header, fields) -> None:
        T, X = np.meshgrid(tm.times, grid.nodes, indexing="ij")
        self.write_csv(name, ["t", "x", *header], [T, X, *fields])

    def write_json(self, name: str, obj) -> None:
        with open(self._path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def commit(self, config_echo, summary) -> None:
        inventory = []
        for name in sorted(self.files):
            with open(os.path.join(self.stage, name), "rb") as fh:
                data = fh.read()
            inventory.append({"file": name, "bytes": len(data),
                              "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {"config": config_echo, "summary": summary, "files": inventory}
        with open(os.path.join(self.stage, "manifest.json"), "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.makedirs(self.out_dir, exist_ok=True)
        stale = os.path.join(self.out_dir, "error.json")
        if os.path.exists(stale):
            os.remove(stale)
        for name in self.files + ["manifest.json"]:
            os.replace(os.path.join(self.stage, name), os.path.join(self.out_dir, name))
        shutil.rmtree(self.stage, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _echo(cfg: RunConfig) -> dict:
    echo = {k: v for k, v in cfg.raw.items()}
    echo.update(domain=list(cfg.domain), n_cells=cfg.n_cells, n_steps=cfg.n_steps,
                s_list=cfg.s_list, tol=cfg.tol, tol_mass=cfg.tol_mass, max_iter=cfg.max_iter)
    return echo


def _run_parallel(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _check(cond: bool, message: str, failures: list) -> None:
    if not cond:
        failures.append(message)


# ---------------------------------------------------------------- commands

def cmd_solve(cfg: RunConfig, out: OutputWriter, threads: int = 1) -> dict:
    insts = instances(cfg)
    bundle = _bundle(insts[0].spec, insts[0].grid, insts[0].tm, cfg)
    sols = _run_parallel(lambda inst: usbp.solve(inst, bundle, cfg.tol, cfg.max_iter),
                         insts, threads)
    grid, tm = insts[0].grid, insts[0].tm
    b = np.stack([insts[0].spec.drift(t, grid.nodes) for t in tm.times])
    summary = {"backend": BACKEND, "substeps": bundle.substeps, "runs": []}
    for inst, sol in zip(insts, sols):
        lab = _label(inst.s)
        out.write_field(f"marginal_flow_s{lab}.csv", tm, grid, ["P"], [sol.marginal_P])
        out.write_csv(f"survival_s{lab}.csv", ["t", "surviving_mass", "coffin_mass"],
                      [tm.times, sol.surviving_mass, sol.coffin_mass])
        out.write_field(f"drift_s{lab}.csv", tm, grid, ["drift", "drift_correction"],
                        [b + sol.drift_correction, sol.drift_correction])
        out.write_field(f"killing_s{lab}.csv", tm, grid, ["killing_rate", "alpha"],
                        [sol.posterior_killing, sol.alpha])
        cost = validation.evaluate_cost(sol, inst.spec, grid, tm)
        summary["runs"].append({
            "s": inst.s, "iterations": sol.iterations,
            "final_distance": sol.hilbert_report.distances[-1],
            "fitted_contraction": sol.hilbert_report.fitted_ratio(),
            "terminal_surviving_mass": float(sol.surviving_mass[-1]),
            "terminal_coffin_mass": float(sol.coffin_mass[-1]),
            "cost": {"kinetic": cost.kinetic, "killing_entropy": cost.killing_entropy,
                     "total": cost.total},
        })
    return summary


def dichotomy_report(cfg: RunConfig, insts=None) -> dict:
    """uSBP and reweighted bridge on marginals the prior already satisfies."""
    insts = insts or instances(cfg)
    grid, tm, rho0 = insts[0].grid, insts[0].tm, insts[0].rho0
    killing = cfg.dichotomy.get("killing", cfg.killing)
    spec = cfg.spec(killing)
    bundle = _bundle(spec, grid, tm, cfg)
    rho1 = bundle.K.T @ rho0
    inst = usbp.ProblemInstance(spec, grid, tm, rho0, rho1)
    sol = usbp.solve(inst, bundle, cfg.tol, cfg.max_iter)
    on = sol.marginal_P > 0
    rw = baselines.solve_reweighted(rho0, rho1, bundle, cfg.tol, cfg.max_iter)
    a = np.stack([spec.a(t, grid.nodes) for t in tm.times])
    rw_dc = rw.drift_correction(a, grid.h)
    rw_on = rw.marginal_P > 0
    return {
        "construction": {"prior_killing": killing, "rho1": "surviving prior pushforward K'rho0",
                         "coffin_mass": inst.c1, "n_cells": grid.n_cells,
                         "n_steps": tm.n_steps},
        "usbp_iterations": sol.iterations,
        "usbp_drift_deviation": float(np.max(np.abs(sol.drift_correction[on]))),
        "usbp_alpha_deviation": float(np.max(np.abs(sol.alpha[on] - 1.0))),
        "reweighted_iterations": rw.iterations,
        "reweighted_drift_deviation": float(np.max(np.abs(rw_dc[rw_on]))),
    }


def cmd_compare(cfg: RunConfig, out: OutputWriter, threads: int = 1) -> dict:
    insts = instances(cfg)
    bundle = _bundle(insts[0].spec, insts[0].grid, insts[0].tm, cfg)
    flows = _run_parallel(
        lambda inst: baselines.solve_reweighted(inst.rho0, inst.rho1, bundle, cfg.tol,
                                                cfg.max_iter), insts, threads)
    ref = flows[0].marginal_P
    dev = max((float(np.max(np.abs(f.marginal_P - ref))) for f in flows[1:]), default=0.0)
    grid, tm = insts[0].grid, insts[0].tm
    out.write_field("reweighted_flow.csv", tm, grid, ["P"], [ref])
    dich = dichotomy_report(cfg, insts)
    out.write_json("dichotomy_report.json", dich)
    a = np.stack([insts[0].spec.a(t, grid.nodes) for t in tm.times])
    cost = validation.reweighted_cost(ref, flows[0].drift_correction(a, grid.h),
                                      insts[0].spec, grid, tm)
    failures = []
    _check(dev < 1e-8, f"reweighted flow depends on s (max deviation {dev:.3e})", failures)
    _check(dich["usbp_drift_deviation"] < 1e-6 and dich["usbp_alpha_deviation"] < 1e-6,
           "uSBP moved away from a consistent prior", failures)
    _check(dich["reweighted_drift_deviation"] > 1e-3,
           "reweighted bridge stayed at the prior on the consistent instance", failures)
    return {"backend": BACKEND, "reweighted_max_deviation_across_s": dev,
            "reweighted_cost": {"kinetic": cost.kinetic, "killing": cost.killing_entropy,
                                "total": cost.total},
            "dichotomy": dich, "failures": failures}


def cmd_simulate(cfg: RunConfig, out: OutputWriter, threads: int = 1) -> dict:
    if not cfg.mc:
        raise ConfigError("simulate needs an 'mc' block")
    mc = cfg.mc
    try:
        n_particles = int(mc["n_particles"])
        seed = int(mc["seed"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("mc block needs integer n_particles and seed") from None
    if n_particles < 1:
        raise ConfigError("mc.n_particles must be >= 1")
    insts = instances(cfg, mc.get("n_cells"), mc.get("n_steps"))
    inst0 = insts[0]
    grid, tm = inst0.grid, inst0.tm
    bundle = _bundle(inst0.spec, grid, tm, cfg)
    sols = _run_parallel(lambda inst: usbp.solve(inst, bundle, cfg.tol, cfg.max_iter),
                         insts, threads)
    mid = tm.n_steps // 2
    bins = int(mc.get("tv_bins", 64))
    rows = []
    failures = []
    prior = validation.simulate_prior(inst0.spec, inst0.rho0, n_particles, seed, tm, grid,
                                      record_steps=[tm.n_steps])
    prior_tv = validation.tv_distance(prior.positions[0], bundle.K.T @ inst0.rho0, grid, bins)
    for inst, sol in zip(insts, sols):
        ens = validation.simulate_posterior(sol, inst.spec, inst.rho0, n_particles, seed, tm,
                                            grid, record_steps=[0, mid, tm.n_steps])
        alive = ens.alive_fraction(-1)
        tv1 = validation.tv_distance(ens.positions[-1], sol.marginal_P[-1], grid, bins)
        tvm = validation.tv_distance(ens.positions[1], sol.marginal_P[mid], grid, bins)
        rows.append((inst.s, alive, tv1, tvm))
        target = float(sol.surviving_mass[-1])
        _check(abs(alive - target) <= float(mc.get("alive_tol", 0.01)),
               f"s={_label(inst.s)}: alive fraction {alive:.4f} vs {target:.4f}", failures)
        tv_tol = float(mc.get("tv_tol", 0.03))
        _check(tv1 < tv_tol and tvm < tv_tol,
               f"s={_label(inst.s)}: TV {tv1:.4f} (t=1), {tvm:.4f} (t={tm.times[mid]:g})",
               failures)
        if inst.c1 == 0:
            _check(np.all(ens.death_step < 0), f"s={_label(inst.s)}: deaths with zero killing",
                   failures)
    out.write_csv("mc_summary.csv", ["s", "alive_fraction", "tv_distance_t1", "tv_distance_tmid"],
                  list(zip(*rows)))
    return {"backend": BACKEND, "n_particles": n_particles, "seed": seed,
            "mesh": [grid.n_cells, tm.n_steps], "tv_bins": bins,
            "prior_alive_fraction": prior.alive_fraction(-1), "prior_tv_t1": prior_tv,
            "failures": failures}


def cmd_oracle_check(cfg: RunConfig, out: OutputWriter, threads: int = 1) -> dict:
    oc = cfg.oracle
    n = int(oc.get("n_cells", 16))
    if n > 64:
        raise ConfigError("oracle-check is limited to n_cells <= 64")
    m = int(oc.get("n_steps", 100))
    tol = float(oc.get("tol", 1e-12))
    gauge = float(oc.get("gauge_scale", 5.0))
    s = float(oc.get("s", cfg.s_list[-1]))
    sub = RunConfig(**{**cfg.__dict__, "s_list": [s]})
    inst = instances(sub, n, m, require_fine=False)[0]
    bundle = _bundle(inst.spec, inst.grid, inst.tm, cfg)
    sol = usbp.solve(inst, bundle, tol, cfg.max_iter)
    oracle = baselines.static_oracle(inst, bundle)
    pi = sol.static_coupling(inst, bundle)
    gap = float(np.max(np.abs(pi - oracle.pi)))
    coffin_err = float(abs(pi[:, -1].sum() - inst.c1))
    eig = usbp.fixed_point_eigenvalue(sol.final_state, inst, bundle)
    sol5 = usbp.solve(inst, bundle, tol, cfg.max_iter, init_scale=gauge)
    gauge_gap = float(max(np.max(np.abs(sol5.marginal_P - sol.marginal_P)),
                          np.max(np.abs(sol5.coffin_mass - sol.coffin_mass)),
                          np.max(np.abs(sol5.drift_correction - sol.drift_correction)),
                          np.max(np.abs(sol5.posterior_killing - sol.posterior_killing))))
    report = {"n_cells": n, "n_steps": m, "s": s, "iterations": sol.iterations,
              "max_entrywise_gap": gap, "coffin_marginal_error": coffin_err,
              "oracle_residual": oracle.residual, "oracle_entropy": oracle.entropy,
              "eigenvalue_ratio": eig.ratio, "eigenvalue_spread": eig.spread,
              "eigenvalue_pairing": eig.pairing, "gauge_scale": gauge,
              "gauge_flow_gap": gauge_gap}
    out.write_json("oracle_report.json", report)
    failures = []
    _check(gap < 1e-7, f"dynamic and static couplings differ by {gap:.3e}", failures)
    _check(coffin_err < 1e-10, f"coffin marginal off by {coffin_err:.3e}", failures)
    _check(abs(eig.ratio - 1) < 1e-6 and eig.spread < 1e-6,
           f"fixed point eigenvalue {eig.ratio:.9f} (spread {eig.spread:.2e})", failures)
    _check(gauge_gap < 1e-8, f"initial scaling changed the outputs by {gauge_gap:.3e}", failures)
    return {"backend": BACKEND, "report": report, "failures": failures}


COMMANDS = {"solve": cmd_solve, "compare": cmd_compare, "simulate": cmd_simulate,
            "oracle-check": cmd_oracle_check}


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usbridge",
                                description="Schroedinger bridges for diffusions with killing")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=None,
                   help="output directory (default: $USBRIDGE_OUT or ./usbridge_out)")
    p.add_argument("--threads", type=int, default=1, help="concurrent per-s solves")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_record(out_dir, code, kind, message) -> None:
    record = {"exit_code": code, "error": kind, "message": message}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "error.json"), "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out or os.environ.get("USBRIDGE_OUT") or "usbridge_out"
    if args.threads < 1:
        _error_record(out_dir, EXIT_CONFIG, "ConfigError", "--threads must be >= 1")
        return EXIT_CONFIG
    writer = None
    try:
        cfg = load_config(args.config)
        writer = OutputWriter(out_dir)
        summary = COMMANDS[args.command](cfg, writer, args.threads)
        failures = summary.get("failures", [])
        if failures:
            raise ValidationFailure("; ".join(failures))
        writer.commit(_echo(cfg), summary)
    except ConfigError as exc:
        code, kind, msg = EXIT_CONFIG, "ConfigError", str(exc)
    except usbp.ConvergenceError as exc:
        code, kind, msg = EXIT_CONVERGENCE, "ConvergenceError", str(exc)
    except ValidationFailure as exc:
        code, kind, msg = EXIT_VALIDATION, "ValidationFailure", str(exc)
    except usbp.SupportError as exc:
        code, kind, msg = EXIT_CONVERGENCE, "SupportError", str(exc)
    else:
        return EXIT_OK
    if writer is not None:
        writer.abort()
    _error_record(out_dir, code, kind, msg)
    return code


if __name__ == "__main__":
    sys.exit(main())
