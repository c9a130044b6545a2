# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-voxel inversion-recovery fitting kernel.

Mirrors ``t1q._kernels_py.fit_batch`` exactly: same grid scan, same bisection
stopping rule, same status codes.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()

cdef enum:
    OK = 0
    OUT_OF_BRACKET = 1
    DEGENERATE = 2
    AMBIGUOUS = 3

cdef inline double _factor(double ti, double t1, double tr) noexcept nogil:
    return 1.0 - 2.0 * exp(-ti / t1) + exp(-tr / t1)

cdef inline int _sign(double x) noexcept nogil:
    if x > 0.0:
        return 1
    if x < 0.0:
        return -1
    return 0


cdef void _fit_one(double i1, double i2,
                   const double[::1] grid, const double[::1] f1, const double[::1] f2,
                   double ti1, double ti2, double tr, double rel_tol, int max_iter,
                   double *pd_out, double *t1_out, signed char *status_out) noexcept nogil:
    cdef Py_ssize_t k, n = grid.shape[0]
    cdef Py_ssize_t last_idx = -1, lo_idx = -1, hi_idx = -1
    cdef int last_sign = 0, s, changes = 0, it
    cdef double h, lo, hi, mid, hm, t1, a1, a2, pd

    pd_out[0] = 0.0
    t1_out[0] = 0.0
    if i1 == 0.0 and i2 == 0.0:
        status_out[0] = DEGENERATE
        return

    for k in range(n):
        h = i2 * f1[k] - i1 * f2[k]
        s = _sign(h)
        if s == 0:
            continue
        if last_sign != 0 and s != last_sign:
            changes += 1
            if changes == 1:
                lo_idx = last_idx
                hi_idx = k
        last_sign = s
        last_idx = k

    if changes == 0:
        status_out[0] = OUT_OF_BRACKET
        return
    if changes > 1:
        status_out[0] = AMBIGUOUS
        return

    lo = grid[lo_idx]
    hi = grid[hi_idx]
    s = _sign(i2 * f1[lo_idx] - i1 * f2[lo_idx])
    for it in range(max_iter):
        if hi - lo <= rel_tol * lo:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        hm = i2 * _factor(ti1, mid, tr) - i1 * _factor(ti2, mid, tr)
        if hm == 0.0:
            lo = mid
            hi = mid
            break
        if _sign(hm) == s:
            lo = mid
        else:
            hi = mid
    t1 = 0.5 * (lo + hi)

    a1 = _factor(ti1, t1, tr)
    a2 = _factor(ti2, t1, tr)
    if fabs(a1) >= fabs(a2):
        pd = i1 / a1
    else:
        pd = i2 / a2
    if not (pd >= 0.0):
        status_out[0] = DEGENERATE
        return
    pd_out[0] = pd
    t1_out[0] = t1
    status_out[0] = OK


def fit_batch(const double[::1] i1, const double[::1] i2,
              const double[::1] grid, const double[::1] f1, const double[::1] f2,
              double ti1, double ti2, double tr, double rel_tol=1e-13, int max_iter=200):
    cdef Py_ssize_t j, n = i1.shape[0]
    pd = np.zeros(n, dtype=np.float64)
    t1 = np.zeros(n, dtype=np.float64)
    status = np.zeros(n, dtype=np.int8)
    cdef double[::1] pd_v = pd
    cdef double[::1] t1_v = t1
    cdef signed char[::1] st_v = status
    with nogil:
        for j in range(n):
            _fit_one(i1[j], i2[j], grid, f1, f2, ti1, ti2, tr, rel_tol, max_iter,
                     &pd_v[j], &t1_v[j], &st_v[j])
    return pd, t1, status
