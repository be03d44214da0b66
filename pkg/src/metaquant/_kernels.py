"""Hot numeric kernels: im2col / col2im and the fused quantizer pass.

Two implementations live side by side.  The numba versions are used when
numba imports cleanly and ``METAQUANT_DISABLE_NUMBA`` is unset (or ``0``);
otherwise the pure-numpy versions are used.  Both produce bit-identical
output: the kernels only copy, compare, floor and accumulate in a fixed
order, and every arithmetic step is carried out in the array dtype.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("METAQUANT_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()

# rounding codes for the quantizer kernel
ROUND_FLOOR = 0
ROUND_HALF_UP = 1
ROUND_SIGN = 2


def out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral output extent: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = out_extent(h, kh, stride, pad)
    wo = out_extent(w, kw, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + he:stride, j:j + we:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho = out_extent(h, kh, stride, pad)
    wo = out_extent(w, kw, stride, pad)
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + he:stride, j:j + we:stride] += cols6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def quantize_numpy(x, alpha, lo, hi, rounding):
    """Return (codes, active_mask, scale_surrogate) as arrays of x.dtype.

    ``alpha``, ``lo`` and ``hi`` must already be scalars of x.dtype.
    """
    y = x / alpha
    c = np.minimum(np.maximum(y, lo), hi)
    if rounding == ROUND_FLOOR:
        code = np.floor(c)
    elif rounding == ROUND_HALF_UP:
        code = np.floor(c + x.dtype.type(0.5))
    else:
        code = np.where(c >= 0, x.dtype.type(1), x.dtype.type(-1))
    active = (y > lo) & (y < hi)
    s = np.where(active, code - y, code)
    return code, active.astype(x.dtype), s


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @nb.njit(cache=True)
    def _im2col_nb(xp, cols, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    for ni in range(n):
                        for a in range(ho):
                            r = a * stride + i
                            for b in range(wo):
                                cols[ci, i, j, ni, a, b] = xp[ni, ci, r, b * stride + j]

    @nb.njit(cache=True)
    def _col2im_nb(cols, xp, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        for i in range(kh):
            for j in range(kw):
                for ni in range(n):
                    for ci in range(c):
                        for a in range(ho):
                            r = a * stride + i
                            for b in range(wo):
                                xp[ni, ci, r, b * stride + j] += cols[ci, i, j, ni, a, b]

    @nb.njit(cache=True)
    def _quantize_nb(x, alpha, lo, hi, rounding, half, one, code, active, s):
        for k in range(x.size):
            y = x[k] / alpha
            c = y
            if c < lo:
                c = lo
            if c > hi:
                c = hi
            if rounding == 0:
                q = np.floor(c)
            elif rounding == 1:
                q = np.floor(c + half)
            else:
                q = one if c >= 0 else -one
            code[k] = q
            if y > lo and y < hi:
                active[k] = one
                s[k] = q - y
            else:
                active[k] = 0
                s[k] = q


def im2col_numba(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = out_extent(h, kh, stride, pad)
    wo = out_extent(w, kw, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    _im2col_nb(xp, cols, kh, kw, stride, ho, wo)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im_numba(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho = out_extent(h, kh, stride, pad)
    wo = out_extent(w, kw, stride, pad)
    cols6 = np.ascontiguousarray(cols).reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    _col2im_nb(cols6, xp, kh, kw, stride, ho, wo)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def quantize_numba(x, alpha, lo, hi, rounding):
    flat = np.ascontiguousarray(x).reshape(-1)
    dt = x.dtype.type
    code = np.empty_like(flat)
    active = np.empty_like(flat)
    s = np.empty_like(flat)
    _quantize_nb(flat, alpha, lo, hi, rounding, dt(0.5), dt(1), code, active, s)
    shp = x.shape
    return code.reshape(shp), active.reshape(shp), s.reshape(shp)


# im2col stays on numpy for both backends: the strided-view gather already
# runs at memory speed and the compiled loop measured slower
if USE_NUMBA:
    im2col, col2im, quantize = im2col_numpy, col2im_numba, quantize_numba
else:
    im2col, col2im, quantize = im2col_numpy, col2im_numpy, quantize_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
