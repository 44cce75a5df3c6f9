"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N, C, H, W, 3, 3) view over the zero-padded input
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if w.shape[1:] != (x.shape[1], 3, 3) or b.shape != (w.shape[0],):
        raise ValueError("conv3x3_forward: weight/bias shape mismatch")
    y = np.einsum("nchwij,ocij->nohw", _patches(x), w, optimize=True)
    y += b[None, :, None, None]
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv3x3_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    n, _, h, wd = x.shape
    if dy.shape != (n, w.shape[0], h, wd):
        raise ValueError("conv3x3_backward: gradient shape mismatch")
    db = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    dw = np.einsum("nchwij,nohw->ocij", _patches(x), dy, optimize=True)
    # input gradient is a same-padded correlation of dy with the 180-degree rotated kernel
    flipped = w[:, :, ::-1, ::-1]
    dx = np.einsum("nohwij,ocij->nchw", _patches(dy), flipped, optimize=True)
    dt = x.dtype
    return np.ascontiguousarray(dx, dtype=dt), dw.astype(dt), db.astype(dt)


def filter_histograms(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if not hi > lo:
        raise ValueError("filter_histograms: need lo < hi")
    if bins < 1:
        raise ValueError("filter_histograms: bins must be positive")
    values = np.asarray(values, dtype=np.float64)
    idx = np.floor((values - lo) * (bins / (hi - lo)))
    idx = np.clip(idx, 0, bins - 1).astype(np.int64)
    counts = np.zeros((values.shape[0], bins), dtype=np.int64)
    rows = np.repeat(np.arange(values.shape[0]), values.shape[1])
    np.add.at(counts, (rows, idx.ravel()), 1)
    return counts


def cdf_l1(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError("cdf_l1: length mismatch")
    return float(np.abs(np.cumsum(a) - np.cumsum(b)).sum())
