# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: Crank-Nicolson sweeps and the particle integrator.

Band convention for a tridiagonal matrix M stored as ``bands[3, nf, n]``:
``bands[0, j, i] = M[i, i-1]``, ``bands[1, j, i] = M[i, i]``,
``bands[2, j, i] = M[i, i+1]`` for fine step ``j``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, cos, sqrt, floor, M_PI
from libc.stdlib cimport malloc, calloc, free
from libc.stdint cimport uint64_t

cnp.import_array()

# rows per cache block in the sweeps
cdef enum:
    _BLOCK = 32


cdef inline void _factor(const double* sub, const double* diag, const double* sup,
                         double* cp, double* inv, Py_ssize_t n) noexcept nogil:
    # LU factors of a tridiagonal matrix: pivot reciprocals and upper multipliers
    cdef Py_ssize_t i
    inv[0] = 1.0 / diag[0]
    cp[0] = sup[0] * inv[0]
    for i in range(1, n):
        inv[i] = 1.0 / (diag[i] - sub[i] * cp[i - 1])
        cp[i] = sup[i] * inv[i]


cdef inline void _apply_block(const double* sub, const double* diag, const double* sup,
                              const double* x, double* y, Py_ssize_t n) noexcept nogil:
    # y = M x for a block of _BLOCK interleaved columns (row-major n x _BLOCK)
    cdef Py_ssize_t i, r
    for r in range(_BLOCK):
        y[r] = diag[0] * x[r] + sup[0] * x[_BLOCK + r]
    for i in range(1, n - 1):
        for r in range(_BLOCK):
            y[i * _BLOCK + r] = (sub[i] * x[(i - 1) * _BLOCK + r] + diag[i] * x[i * _BLOCK + r]
                                 + sup[i] * x[(i + 1) * _BLOCK + r])
    for r in range(_BLOCK):
        y[(n - 1) * _BLOCK + r] = (sub[n - 1] * x[(n - 2) * _BLOCK + r]
                                   + diag[n - 1] * x[(n - 1) * _BLOCK + r])


cdef inline void _solve_block(const double* sub, const double* cp, const double* inv,
                              double* rhs, Py_ssize_t n) noexcept nogil:
    # in-place factored tridiagonal solve; the columns give independent chains
    cdef Py_ssize_t i, r
    for r in range(_BLOCK):
        rhs[r] = rhs[r] * inv[0]
    for i in range(1, n):
        for r in range(_BLOCK):
            rhs[i * _BLOCK + r] = (rhs[i * _BLOCK + r] - sub[i] * rhs[(i - 1) * _BLOCK + r]) * inv[i]
    for i in range(n - 2, -1, -1):
        for r in range(_BLOCK):
            rhs[i * _BLOCK + r] -= cp[i] * rhs[(i + 1) * _BLOCK + r]


cdef inline void _transpose_bands(const double* sub, const double* sup,
                                  double* sub_t, double* sup_t, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    sub_t[0] = 0.0
    for i in range(1, n):
        sub_t[i] = sup[i - 1]
    for i in range(n - 1):
        sup_t[i] = sub[i + 1]
    sup_t[n - 1] = 0.0


def forward_sweep(const double[:, :, ::1] A, const double[:, :, ::1] E, const double[:, ::1] decay,
                  const double[:, ::1] x0, Py_ssize_t stride, double h, bint keep):
    """Advance each row of ``x0`` through all fine steps.

    A fine step is ``D C D`` with ``C = A^-1 E`` the transport part and
    ``D = decay[j]`` the killing factor.  Returns ``(final, traj, absorbed)`` where ``traj`` is ``None`` unless
    ``keep``; ``absorbed[k, r]`` is the cumulative killed mass at coarse step k.
    """
    cdef Py_ssize_t nf = A.shape[1], n = A.shape[2], nr = x0.shape[0]
    cdef Py_ssize_t nc = nf // stride
    cdef Py_ssize_t j, r, i, bi, r0, nb
    cdef double vt
    final = np.array(x0, dtype=np.float64, copy=True)
    absorbed = np.zeros((nc + 1, nr))
    cdef double[:, ::1] X = final
    cdef double[:, ::1] ab = absorbed
    cdef double[:, :, ::1] T
    if keep:
        traj = np.empty((nc + 1, nr, n))
        T = traj
        T[0, :, :] = X
    else:
        traj = None
    # the implicit factors do not depend on the row, so factor every step once
    cp_arr = np.empty((nf, n))
    inv_arr = np.empty((nf, n))
    cdef double[:, ::1] CP = cp_arr
    cdef double[:, ::1] INV = inv_arr
    cdef double* xb = <double*> calloc(n * _BLOCK, sizeof(double))
    cdef double* yb = <double*> calloc(n * _BLOCK, sizeof(double))
    cdef double* zb = <double*> calloc(n * _BLOCK, sizeof(double))
    cdef double d
    cdef double* acc = <double*> malloc(_BLOCK * sizeof(double))
    cdef double* running = <double*> malloc(_BLOCK * sizeof(double))
    try:
        with nogil:
            for j in range(nf):
                _factor(&A[0, j, 0], &A[1, j, 0], &A[2, j, 0], &CP[j, 0], &INV[j, 0], n)
            for bi in range((nr + _BLOCK - 1) // _BLOCK):
                r0 = bi * _BLOCK
                nb = min(_BLOCK, nr - r0)
                for i in range(n):
                    for r in range(_BLOCK):
                        xb[i * _BLOCK + r] = X[r0 + r, i] if r < nb else 0.0
                for r in range(_BLOCK):
                    running[r] = 0.0
                for j in range(nf):
                    for i in range(n):
                        d = decay[j, i]
                        for r in range(_BLOCK):
                            zb[i * _BLOCK + r] = d * xb[i * _BLOCK + r]
                    _apply_block(&E[0, j, 0], &E[1, j, 0], &E[2, j, 0], zb, yb, n)
                    _solve_block(&A[0, j, 0], &CP[j, 0], &INV[j, 0], yb, n)
                    # half the step's killing acts before the transport, half after
                    for r in range(_BLOCK):
                        acc[r] = 0.0
                    for i in range(n):
                        vt = 1.0 - decay[j, i]
                        for r in range(_BLOCK):
                            acc[r] = acc[r] + vt * (xb[i * _BLOCK + r] + yb[i * _BLOCK + r])
                    for r in range(_BLOCK):
                        running[r] = running[r] + h * acc[r]
                    for i in range(n):
                        d = decay[j, i]
                        for r in range(_BLOCK):
                            xb[i * _BLOCK + r] = d * yb[i * _BLOCK + r]
                    if (j + 1) % stride == 0:
                        for r in range(nb):
                            ab[(j + 1) // stride, r0 + r] = running[r]
                        if keep:
                            for r in range(nb):
                                for i in range(n):
                                    T[(j + 1) // stride, r0 + r, i] = xb[i * _BLOCK + r]
                for r in range(nb):
                    for i in range(n):
                        X[r0 + r, i] = xb[i * _BLOCK + r]
    finally:
        free(xb)
        free(yb)
        free(zb)
        free(acc)
        free(running)
    return final, traj, absorbed


def backward_sweep(const double[:, :, ::1] A, const double[:, :, ::1] E, const double[:, ::1] decay,
                   const double[:, ::1] phi1, const double[::1] psi, Py_ssize_t stride, bint keep):
    """Adjoint sweep with the coffin source ``psi`` (one value per row)."""
    cdef Py_ssize_t nf = A.shape[1], n = A.shape[2], nr = phi1.shape[0]
    cdef Py_ssize_t nc = nf // stride
    cdef Py_ssize_t j, r, i, bi, r0, nb
    cdef double vt, d
    final = np.array(phi1, dtype=np.float64, copy=True)
    cdef double[:, ::1] X = final
    cdef double[:, :, ::1] T
    if keep:
        traj = np.empty((nc + 1, nr, n))
        T = traj
        T[nc, :, :] = X
    else:
        traj = None
    # transposed bands and factors of every step, shared by all rows
    at_arr = np.empty((2, nf, n))
    et_arr = np.empty((2, nf, n))
    cp_arr = np.empty((nf, n))
    inv_arr = np.empty((nf, n))
    cdef double[:, :, ::1] AT = at_arr
    cdef double[:, :, ::1] ET = et_arr
    cdef double[:, ::1] CP = cp_arr
    cdef double[:, ::1] INV = inv_arr
    cdef double* xb = <double*> calloc(n * _BLOCK, sizeof(double))
    cdef double* wb = <double*> calloc(n * _BLOCK, sizeof(double))
    cdef double* ps = <double*> calloc(_BLOCK, sizeof(double))
    try:
        with nogil:
            for j in range(nf):
                _transpose_bands(&A[0, j, 0], &A[2, j, 0], &AT[0, j, 0], &AT[1, j, 0], n)
                _transpose_bands(&E[0, j, 0], &E[2, j, 0], &ET[0, j, 0], &ET[1, j, 0], n)
                _factor(&AT[0, j, 0], &A[1, j, 0], &AT[1, j, 0], &CP[j, 0], &INV[j, 0], n)
            for bi in range((nr + _BLOCK - 1) // _BLOCK):
                r0 = bi * _BLOCK
                nb = min(_BLOCK, nr - r0)
                for r in range(_BLOCK):
                    ps[r] = psi[r0 + r] if r < nb else 0.0
                for i in range(n):
                    for r in range(_BLOCK):
                        xb[i * _BLOCK + r] = X[r0 + r, i] if r < nb else 0.0
                for j in range(nf - 1, -1, -1):
                    for i in range(n):
                        d = decay[j, i]
                        vt = 1.0 - d
                        for r in range(_BLOCK):
                            wb[i * _BLOCK + r] = d * xb[i * _BLOCK + r] + vt * ps[r]
                    _solve_block(&AT[0, j, 0], &CP[j, 0], &INV[j, 0], wb, n)
                    _apply_block(&ET[0, j, 0], &E[1, j, 0], &ET[1, j, 0], wb, xb, n)
                    for i in range(n):
                        d = decay[j, i]
                        vt = 1.0 - d
                        for r in range(_BLOCK):
                            xb[i * _BLOCK + r] = d * xb[i * _BLOCK + r] + vt * ps[r]
                    if keep and j % stride == 0:
                        for r in range(nb):
                            for i in range(n):
                                T[j // stride, r0 + r, i] = xb[i * _BLOCK + r]
                for r in range(nb):
                    for i in range(n):
                        X[r0 + r, i] = xb[i * _BLOCK + r]
    finally:
        free(xb)
        free(wb)
        free(ps)
    return final, traj


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t pkey, uint64_t step, uint64_t lane) noexcept nogil:
    cdef uint64_t z = _mix(pkey ^ ((step * 4 + lane + 1) * <uint64_t>0xD1B54A32D192ED03ULL))
    return (<double>(z >> 11) + 0.5) * 1.1102230246251565e-16


cdef inline double _interp(const double* f, double x, double lo, double h,
                           Py_ssize_t n) noexcept nogil:
    cdef double u = (x - lo) / h - 0.5
    cdef double fl = floor(u)
    cdef Py_ssize_t i = <Py_ssize_t> fl
    cdef double w
    if u <= 0.0:
        return f[0]
    if i >= n - 1:
        return f[n - 1]
    w = u - fl
    return (1.0 - w) * f[i] + w * f[i + 1]


def simulate_particles(const double[::1] x0, const cnp.uint64_t[::1] pkeys,
                       const double[:, ::1] drift, const double[:, ::1] sigma,
                       const double[:, ::1] kill,
                       double lo, double hi, double dt,
                       const cnp.int64_t[::1] record_steps):
    """Euler-Maruyama with reflection and exponential-clock killing.

    ``pkeys`` holds one hashed key per particle, so each particle draws from its
    own counter-based stream.  Returns ``(positions, death_step)`` where
    ``positions[m, p]`` is NaN for particles dead at ``record_steps[m]`` and
    ``death_step[p]`` is the first step index at which the particle is dead
    (``-1`` if it survives).
    """
    cdef Py_ssize_t npart = x0.shape[0], ns = drift.shape[0], n = drift.shape[1]
    cdef Py_ssize_t nrec = record_steps.shape[0]
    cdef double h = (hi - lo) / n
    cdef double sqdt = sqrt(dt)
    positions = np.full((nrec, npart), np.nan)
    death = np.full(npart, -1, dtype=np.int64)
    cdef double[:, ::1] pos = positions
    cdef cnp.int64_t[::1] dth = death
    cdef Py_ssize_t p, k, m
    cdef double x, b, s, kap, u1, u2, xi
    cdef uint64_t key
    with nogil:
        for p in range(npart):
            x = x0[p]
            key = pkeys[p]
            m = 0
            while m < nrec and record_steps[m] == 0:
                pos[m, p] = x
                m += 1
            for k in range(ns):
                kap = _interp(&kill[k, 0], x, lo, h, n)
                if kap > 0.0 and _uniform(key, k, 2) < 1.0 - exp(-kap * dt):
                    dth[p] = k + 1
                    break
                b = _interp(&drift[k, 0], x, lo, h, n)
                s = _interp(&sigma[k, 0], x, lo, h, n)
                u1 = _uniform(key, k, 0)
                u2 = _uniform(key, k, 1)
                xi = sqrt(-2.0 * log(u1)) * cos(2.0 * M_PI * u2)
                x = x + b * dt + s * sqdt * xi
                if x < lo:
                    x = 2.0 * lo - x
                if x > hi:
                    x = 2.0 * hi - x
                if x < lo:
                    x = lo
                while m < nrec and record_steps[m] == k + 1:
                    pos[m, p] = x
                    m += 1
    return positions, death
