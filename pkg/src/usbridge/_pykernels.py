"""Pure numpy/scipy versions of the compiled kernels in ``_ckernels``.

Signatures and return values match the compiled module one-to-one; see its
docstrings for the band layout.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_LANE = np.uint64(0xD1B54A32D192ED03)


def _ab(sub, diag, sup):
    # scipy's (1, 1) banded layout
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = sup[:-1]
    ab[1] = diag
    ab[2, :-1] = sub[1:]
    return ab


def _apply(sub, diag, sup, x):
    # x has shape (n, r)
    y = diag[:, None] * x
    y[1:] += sub[1:, None] * x[:-1]
    y[:-1] += sup[:-1, None] * x[1:]
    return y


def _transpose(sub, sup):
    sub_t = np.zeros_like(sub)
    sup_t = np.zeros_like(sup)
    sub_t[1:] = sup[:-1]
    sup_t[:-1] = sub[1:]
    return sub_t, sup_t


def forward_sweep(A, E, decay, x0, stride, h, keep):
    nf, n = A.shape[1], A.shape[2]
    nc = nf // stride
    X = np.array(x0, dtype=float).T.copy()  # (n, r)
    nr = X.shape[1]
    absorbed = np.zeros((nc + 1, nr))
    traj = None
    if keep:
        traj = np.empty((nc + 1, nr, n))
        traj[0] = X.T
    running = np.zeros(nr)
    for j in range(nf):
        D = decay[j][:, None]
        y = _apply(E[0, j], E[1, j], E[2, j], D * X)
        y = solve_banded((1, 1), _ab(A[0, j], A[1, j], A[2, j]), y,
                         overwrite_b=True, check_finite=False)
        # half the step's killing acts before the transport, half after
        running = running + h * ((1.0 - decay[j]) @ (X + y))
        X = D * y
        if (j + 1) % stride == 0:
            absorbed[(j + 1) // stride] = running
            if keep:
                traj[(j + 1) // stride] = X.T
    return np.ascontiguousarray(X.T), traj, absorbed


def backward_sweep(A, E, decay, phi1, psi, stride, keep):
    nf, n = A.shape[1], A.shape[2]
    nc = nf // stride
    X = np.array(phi1, dtype=float).T.copy()
    psi = np.asarray(psi, dtype=float)
    traj = None
    if keep:
        traj = np.empty((nc + 1, X.shape[1], n))
        traj[nc] = X.T
    for j in range(nf - 1, -1, -1):
        a_sub, a_sup = _transpose(A[0, j], A[2, j])
        e_sub, e_sup = _transpose(E[0, j], E[2, j])
        D = decay[j][:, None]
        src = (1.0 - decay[j])[:, None] * psi[None, :]
        w = solve_banded((1, 1), _ab(a_sub, A[1, j], a_sup), D * X + src,
                         overwrite_b=True, check_finite=False)
        X = D * _apply(e_sub, E[1, j], e_sup, w) + src
        if keep and j % stride == 0:
            traj[j // stride] = X.T
    return np.ascontiguousarray(X.T), traj


def _mix(z):
    # uint64 arithmetic wraps on purpose
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _uniform(pkeys, step, lane):
    with np.errstate(over="ignore"):
        salt = np.uint64(step * 4 + lane + 1) * _LANE
    z = _mix(pkeys ^ salt)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 1.1102230246251565e-16


def _interp(f, x, lo, h):
    n = f.size
    u = (x - lo) / h - 0.5
    fl = np.floor(u)
    i = np.clip(fl.astype(np.int64), 0, n - 2)
    w = u - fl
    out = (1.0 - w) * f[i] + w * f[i + 1]
    out = np.where(u <= 0.0, f[0], out)
    return np.where(fl >= n - 1, f[n - 1], out)


def simulate_particles(x0, pkeys, drift, sigma, kill, lo, hi, dt, record_steps):
    ns = drift.shape[0]
    npart = x0.size
    record_steps = np.asarray(record_steps, dtype=np.int64)
    h = (hi - lo) / drift.shape[1]
    sqdt = np.sqrt(dt)
    positions = np.full((record_steps.size, npart), np.nan)
    death = np.full(npart, -1, dtype=np.int64)
    x = np.array(x0, dtype=float)
    pkeys = np.asarray(pkeys, dtype=np.uint64)
    idx = np.arange(npart)
    for m in np.flatnonzero(record_steps == 0):
        positions[m] = x
    with np.errstate(over="ignore"):
        for k in range(ns):
            keys = pkeys[idx]
            kap = _interp(kill[k], x, lo, h)
            u = _uniform(keys, k, 2)
            dies = (kap > 0.0) & (u < 1.0 - np.exp(-kap * dt))
            death[idx[dies]] = k + 1
            live = ~dies
            idx, x, keys = idx[live], x[live], keys[live]
            b = _interp(drift[k], x, lo, h)
            s = _interp(sigma[k], x, lo, h)
            xi = np.sqrt(-2.0 * np.log(_uniform(keys, k, 0))) * np.cos(
                2.0 * np.pi * _uniform(keys, k, 1))
            x = x + b * dt + s * sqdt * xi
            x = np.where(x < lo, 2.0 * lo - x, x)
            x = np.where(x > hi, 2.0 * hi - x, x)
            x = np.where(x < lo, lo, x)
            for m in np.flatnonzero(record_steps == k + 1):
                positions[m, idx] = x
    return positions, death
