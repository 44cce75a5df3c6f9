# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: 3x3 same-padding convolution and per-filter histogramming.

Signatures and results match :mod:`arm_meter._purepy` exactly (up to float
summation order for the convolutions).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()

ctypedef fused real_t:
    float
    double


cdef inline void _row_fwd(real_t* yr, const real_t* xr, real_t w0, real_t w1, real_t w2,
                          Py_ssize_t W) noexcept nogil:
    # yr[j] += w0*xr[j-1] + w1*xr[j] + w2*xr[j+1], zero outside the row
    cdef Py_ssize_t j
    if W == 1:
        yr[0] += w1 * xr[0]
        return
    yr[0] += w1 * xr[0] + w2 * xr[1]
    for j in range(1, W - 1):
        yr[j] += w0 * xr[j - 1] + w1 * xr[j] + w2 * xr[j + 1]
    yr[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1]


cdef inline void _row_bwd_input(real_t* dxr, const real_t* gr, real_t w0, real_t w1, real_t w2,
                                Py_ssize_t W) noexcept nogil:
    # transpose of _row_fwd: dxr[j] += w2*gr[j-1] + w1*gr[j] + w0*gr[j+1]
    cdef Py_ssize_t j
    if W == 1:
        dxr[0] += w1 * gr[0]
        return
    dxr[0] += w1 * gr[0] + w0 * gr[1]
    for j in range(1, W - 1):
        dxr[j] += w2 * gr[j - 1] + w1 * gr[j] + w0 * gr[j + 1]
    dxr[W - 1] += w2 * gr[W - 2] + w1 * gr[W - 1]


cdef inline void _row_bwd_weight(double* acc3, const real_t* gr, const real_t* xr,
                                 Py_ssize_t W) noexcept nogil:
    # acc3[kx] += sum_j gr[j] * xr[j + kx - 1]
    cdef Py_ssize_t j
    cdef real_t a0 = 0, a1 = 0, a2 = 0
    for j in range(W):
        a1 += gr[j] * xr[j]
    for j in range(1, W):
        a0 += gr[j] * xr[j - 1]
    for j in range(W - 1):
        a2 += gr[j] * xr[j + 1]
    acc3[0] += a0
    acc3[1] += a1
    acc3[2] += a2


def conv3x3_forward(real_t[:, :, :, ::1] x, real_t[:, :, :, ::1] w, real_t[::1] b):
    """Same-padded stride-1 3x3 cross-correlation, (N,C,H,W) -> (N,O,H,W)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    if w.shape[1] != C or w.shape[2] != 3 or w.shape[3] != 3 or b.shape[0] != O:
        raise ValueError("conv3x3_forward: weight/bias shape mismatch")
    dtype = np.float32 if real_t is float else np.float64
    out = np.empty((N, O, H, W), dtype=dtype)
    cdef real_t[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, c, ky, i, ii, k, HW = H * W
    cdef real_t* yp
    cdef const real_t* xp
    with nogil:
        for n in range(N):
            for o in range(O):
                yp = &y[n, o, 0, 0]
                for k in range(HW):
                    yp[k] = b[o]
                for c in range(C):
                    xp = &x[n, c, 0, 0]
                    for i in range(H):
                        for ky in range(3):
                            ii = i + ky - 1
                            if ii < 0 or ii >= H:
                                continue
                            _row_fwd(yp + i * W, xp + ii * W,
                                     w[o, c, ky, 0], w[o, c, ky, 1], w[o, c, ky, 2], W)
    return out


def conv3x3_backward(real_t[:, :, :, ::1] x, real_t[:, :, :, ::1] w, real_t[:, :, :, ::1] dy):
    """Return (dx, dw, db) for :func:`conv3x3_forward` given upstream gradient ``dy``."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    if dy.shape[0] != N or dy.shape[1] != O or dy.shape[2] != H or dy.shape[3] != W:
        raise ValueError("conv3x3_backward: gradient shape mismatch")
    dtype = np.float32 if real_t is float else np.float64
    dx_arr = np.zeros((N, C, H, W), dtype=dtype)
    dw_arr = np.zeros((O, C, 3, 3), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    cdef real_t[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t n, o, c, ky, i, ii, k, HW = H * W
    cdef const real_t* gp
    cdef const real_t* xp
    cdef real_t* dxp
    cdef real_t racc
    with nogil:
        for n in range(N):
            for o in range(O):
                gp = &dy[n, o, 0, 0]
                racc = 0
                for k in range(HW):
                    racc += gp[k]
                db[o] += racc
                for c in range(C):
                    xp = &x[n, c, 0, 0]
                    dxp = &dx[n, c, 0, 0]
                    for i in range(H):
                        for ky in range(3):
                            ii = i + ky - 1
                            if ii < 0 or ii >= H:
                                continue
                            _row_bwd_input(dxp + ii * W, gp + i * W,
                                           w[o, c, ky, 0], w[o, c, ky, 1], w[o, c, ky, 2], W)
                            _row_bwd_weight(&dw[o, c, ky, 0], gp + i * W, xp + ii * W, W)
    return dx_arr, dw_arr.astype(dtype), db_arr.astype(dtype)


def filter_histograms(double[:, ::1] values, double lo, double hi, Py_ssize_t bins):
    """Per-row equal-width bin counts on [lo, hi]; out-of-range values clamp to end bins."""
    if not hi > lo:
        raise ValueError("filter_histograms: need lo < hi")
    if bins < 1:
        raise ValueError("filter_histograms: bins must be positive")
    cdef Py_ssize_t F = values.shape[0], n = values.shape[1]
    counts_arr = np.zeros((F, bins), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    cdef double scale = bins / (hi - lo)
    cdef double t
    cdef Py_ssize_t f, s, k
    with nogil:
        for f in range(F):
            for s in range(n):
                t = floor((values[f, s] - lo) * scale)
                if t < 0:
                    k = 0
                elif t >= bins:
                    k = bins - 1
                else:
                    k = <Py_ssize_t>t
                counts[f, k] += 1
    return counts_arr


def cdf_l1(double[::1] a, double[::1] b):
    """Sum over bins of |CDF_a - CDF_b|."""
    if a.shape[0] != b.shape[0]:
        raise ValueError("cdf_l1: length mismatch")
    cdef Py_ssize_t i, m = a.shape[0]
    cdef double ca = 0.0, cb = 0.0, total = 0.0
    with nogil:
        for i in range(m):
            ca += a[i]
            cb += b[i]
            total += fabs(ca - cb)
    return total
