"""Pure numpy fallback for the compiled fitting kernel.

Same algorithm and stopping rule as ``_kernels.pyx``; voxels are processed in
vectorized chunks instead of a C loop.
"""
import numpy as np

OK, OUT_OF_BRACKET, DEGENERATE, AMBIGUOUS = 0, 1, 2, 3

# voxels x grid points held in memory per scan chunk
_SCAN_BUDGET = 2_000_000


def _factor(ti, t1, tr):
    return 1.0 - 2.0 * np.exp(-ti / t1) + np.exp(-tr / t1)


def _scan(i1, i2, f1, f2):
    """Return (sign-change count, lo index, hi index) of the first change per voxel."""
    h = i2[:, None] * f1[None, :] - i1[:, None] * f2[None, :]
    s = np.sign(h).astype(np.int8)
    n, k = s.shape
    pos = np.where(s != 0, np.arange(k)[None, :], -1)
    last = np.maximum.accumulate(pos, axis=1)
    filled = np.where(last >= 0, np.take_along_axis(s, np.maximum(last, 0), axis=1), 0)
    # a change at k: s[k] nonzero and differs from the last nonzero sign before k
    prev = np.concatenate([np.zeros((n, 1), np.int8), filled[:, :-1]], axis=1)
    change = (s != 0) & (prev != 0) & (s != prev)
    count = change.sum(axis=1)
    hi_idx = np.argmax(change, axis=1)
    prev_last = np.concatenate([np.full((n, 1), -1), last[:, :-1]], axis=1)
    lo_idx = np.take_along_axis(prev_last, hi_idx[:, None], axis=1)[:, 0]
    return count, lo_idx, hi_idx


def fit_batch(i1, i2, grid, f1, f2, ti1, ti2, tr, rel_tol=1e-13, max_iter=200):
    i1 = np.ascontiguousarray(i1, dtype=np.float64)
    i2 = np.ascontiguousarray(i2, dtype=np.float64)
    n = i1.shape[0]
    pd = np.zeros(n)
    t1 = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)

    degenerate = (i1 == 0.0) & (i2 == 0.0)
    count = np.zeros(n, dtype=np.int64)
    lo_idx = np.zeros(n, dtype=np.int64)
    hi_idx = np.zeros(n, dtype=np.int64)
    step = max(1, _SCAN_BUDGET // max(1, grid.shape[0]))
    for start in range(0, n, step):
        sl = slice(start, start + step)
        count[sl], lo_idx[sl], hi_idx[sl] = _scan(i1[sl], i2[sl], f1, f2)

    status[count == 0] = OUT_OF_BRACKET
    status[count > 1] = AMBIGUOUS
    status[degenerate] = DEGENERATE
    sel = np.flatnonzero(status == OK)
    if sel.size == 0:
        return pd, t1, status

    a, b = i1[sel], i2[sel]
    lo = grid[lo_idx[sel]]
    hi = grid[hi_idx[sel]]
    s_lo = np.sign(b * f1[lo_idx[sel]] - a * f2[lo_idx[sel]])
    active = np.ones(sel.size, dtype=bool)
    for _ in range(max_iter):
        active &= ~(hi - lo <= rel_tol * lo)
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        active &= (mid > lo) & (mid < hi)
        hm = b * _factor(ti1, mid, tr) - a * _factor(ti2, mid, tr)
        hit = active & (hm == 0.0)
        lo = np.where(hit, mid, lo)
        hi = np.where(hit, mid, hi)
        active &= ~hit
        same = np.sign(hm) == s_lo
        lo = np.where(active & same, mid, lo)
        hi = np.where(active & ~same, mid, hi)
    root = 0.5 * (lo + hi)

    g1 = _factor(ti1, root, tr)
    g2 = _factor(ti2, root, tr)
    with np.errstate(divide="ignore", invalid="ignore"):
        est = np.where(np.abs(g1) >= np.abs(g2), a / g1, b / g2)
    good = est >= 0.0
    pd[sel[good]] = est[good]
    t1[sel[good]] = root[good]
    status[sel[~good]] = DEGENERATE
    return pd, t1, status
