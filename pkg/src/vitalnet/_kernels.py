"""Hot inner loops: patch extraction for convolution and embedding bags.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one with
the same signature. The module-level names (``im2col``, ``col2im``,
``bag_mean``, ``bag_mean_grad``) point at the numba versions unless numba is
missing or the environment variable ``VITALNET_NUMBA`` is set to ``0``.

The two paths agree to floating-point rounding; each is deterministic on its
own (sequential accumulation order).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False


def _numba_requested() -> bool:
    flag = os.environ.get("VITALNET_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_numpy(x, kh, kw, stride, pad):
    """Unfold ``x`` (N, C, H, W) into rows of (C*kh*kw) patch values.

    Row order is (n, oy, ox); column order is (c, ky, kx).
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for ky in range(kh):
        y_end = ky + stride * ho
        for kx in range(kw):
            x_end = kx + stride * wo
            cols[:, :, ky, kx] = xp[:, :, ky:y_end:stride, kx:x_end:stride]
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(n * ho * wo, c * kh * kw)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col_numpy`: scatter-add patch rows back to an image."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ky in range(kh):
        y_end = ky + stride * ho
        for kx in range(kw):
            x_end = kx + stride * wo
            xp[:, :, ky:y_end:stride, kx:x_end:stride] += patches[:, :, ky, kx]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def bag_mean_numpy(table, idx, offsets):
    """Mean of ``table`` rows per bag; bag ``i`` spans ``idx[offsets[i]:offsets[i+1]]``."""
    n = offsets.shape[0] - 1
    out = np.zeros((n, table.shape[1]), dtype=np.float64)
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        if hi > lo:
            out[i] = table[idx[lo:hi]].sum(axis=0) / (hi - lo)
    return out


def bag_mean_grad_numpy(grad_out, idx, offsets, vocab):
    """Gradient of :func:`bag_mean_numpy` with respect to the table."""
    n = offsets.shape[0] - 1
    counts = np.diff(offsets)
    scale = np.zeros(n, dtype=np.float64)
    nonempty = counts > 0
    scale[nonempty] = 1.0 / counts[nonempty]
    rows = np.repeat(np.arange(n), counts)
    contrib = grad_out[rows] * scale[rows, None]
    grad = np.zeros((vocab, grad_out.shape[1]), dtype=np.float64)
    # np.add.at applies updates in index order, which keeps the sum deterministic
    np.add.at(grad, idx, contrib)
    return grad


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

def _im2col_loops(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((n * ho * wo, c * kh * kw))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for ch in range(c):
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            cols[row, (ch * kh + ky) * kw + kx] = x[b, ch, iy, ix]
    return cols


def _col2im_loops(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    x = np.zeros((n, c, h, w))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for ch in range(c):
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            x[b, ch, iy, ix] += cols[row, (ch * kh + ky) * kw + kx]
    return x


def _bag_mean_loops(table, idx, offsets):
    n = offsets.shape[0] - 1
    dim = table.shape[1]
    out = np.zeros((n, dim))
    for i in range(n):
        lo = offsets[i]
        hi = offsets[i + 1]
        if hi == lo:
            continue
        for j in range(lo, hi):
            t = idx[j]
            for k in range(dim):
                out[i, k] += table[t, k]
        inv = hi - lo
        for k in range(dim):
            out[i, k] /= inv
    return out


def _bag_mean_grad_loops(grad_out, idx, offsets, vocab):
    n = offsets.shape[0] - 1
    dim = grad_out.shape[1]
    grad = np.zeros((vocab, dim))
    for i in range(n):
        lo = offsets[i]
        hi = offsets[i + 1]
        if hi == lo:
            continue
        scale = 1.0 / (hi - lo)
        for j in range(lo, hi):
            t = idx[j]
            for k in range(dim):
                grad[t, k] += grad_out[i, k] * scale
    return grad


if NUMBA_AVAILABLE:
    _im2col_jit = numba.njit(cache=True)(_im2col_loops)
    _col2im_jit = numba.njit(cache=True)(_col2im_loops)
    _bag_mean_jit = numba.njit(cache=True)(_bag_mean_loops)
    _bag_mean_grad_jit = numba.njit(cache=True)(_bag_mean_grad_loops)
else:  # pragma: no cover
    _im2col_jit = _im2col_loops
    _col2im_jit = _col2im_loops
    _bag_mean_jit = _bag_mean_loops
    _bag_mean_grad_jit = _bag_mean_grad_loops


def im2col_numba(x, kh, kw, stride, pad):
    return _im2col_jit(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im_numba(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    return _col2im_jit(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, kh, kw, stride, pad)


def bag_mean_numba(table, idx, offsets):
    return _bag_mean_jit(np.ascontiguousarray(table, dtype=np.float64),
                         np.asarray(idx, dtype=np.int64), np.asarray(offsets, dtype=np.int64))


def bag_mean_grad_numba(grad_out, idx, offsets, vocab):
    return _bag_mean_grad_jit(np.ascontiguousarray(grad_out, dtype=np.float64),
                              np.asarray(idx, dtype=np.int64), np.asarray(offsets, dtype=np.int64),
                              vocab)


BACKENDS = {
    "numpy": (im2col_numpy, col2im_numpy, bag_mean_numpy, bag_mean_grad_numpy),
    "numba": (im2col_numba, col2im_numba, bag_mean_numba, bag_mean_grad_numba),
}

BACKEND = "numba" if USE_NUMBA else "numpy"
im2col, col2im, bag_mean, bag_mean_grad = BACKENDS[BACKEND]
