"""Index-heavy inner loops used by the convolution and pooling ops.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version.  The active pair is chosen once at import time:

* ``PERCEPT_AGE_JIT=0`` forces the numpy path;
* otherwise numba is used when it imports cleanly.

Both paths produce bitwise-identical results (they perform the same
additions in the same order), which ``tests/test_kernels.py`` checks.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _env_wants_jit() -> bool:
    flag = os.environ.get("PERCEPT_AGE_JIT", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _env_wants_jit()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def im2col_numpy(xp, kh, kw, stride, oh, ow):
    """Gather ``(B, oh, ow, kh*kw*C)`` patches from a padded NHWC batch."""
    b, _, _, c = xp.shape
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                :, i : i + stride * oh : stride, j : j + stride * ow : stride, :
            ]
    return cols.reshape(b, oh, ow, kh * kw * c)


def col2im_numpy(dcols, hp, wp, kh, kw, stride):
    """Scatter-add patch gradients back onto a padded NHWC grid."""
    b, oh, ow, _ = dcols.shape
    c = dcols.shape[3] // (kh * kw)
    d6 = dcols.reshape(b, oh, ow, kh, kw, c)
    dx = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += d6[
                :, :, :, i, j, :
            ]
    return dx


def maxpool2_forward_numpy(x):
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(b, h // 2, w // 2, c, 4)
    # argmax returns the first maximal index: row-major tie rule
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward_numpy(gout, idx):
    b, oh, ow, c = gout.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    g = np.where(onehot, gout[..., None], 0.0)
    g = g.reshape(b, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(g.reshape(b, oh * 2, ow * 2, c))


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def im2col_numba(xp, kh, kw, stride, oh, ow):
        b = xp.shape[0]
        c = xp.shape[3]
        cols = np.empty((b, oh, ow, kh * kw * c), dtype=xp.dtype)
        for n in range(b):
            for y in range(oh):
                for x in range(ow):
                    k = 0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                cols[n, y, x, k] = xp[n, y * stride + i, x * stride + j, ch]
                                k += 1
        return cols

    @njit(cache=True)
    def col2im_numba(dcols, hp, wp, kh, kw, stride):
        b, oh, ow, kk = dcols.shape
        c = kk // (kh * kw)
        dx = np.zeros((b, hp, wp, c), dtype=dcols.dtype)
        # offset-major order matches the numpy path's summation order
        for i in range(kh):
            for j in range(kw):
                base = (i * kw + j) * c
                for n in range(b):
                    for y in range(oh):
                        for x in range(ow):
                            for ch in range(c):
                                dx[n, y * stride + i, x * stride + j, ch] += dcols[n, y, x, base + ch]
        return dx

    @njit(cache=True)
    def maxpool2_forward_numba(x):
        b, h, w, c = x.shape
        oh = h // 2
        ow = w // 2
        out = np.empty((b, oh, ow, c), dtype=x.dtype)
        idx = np.empty((b, oh, ow, c), dtype=np.int8)
        for n in range(b):
            for y in range(oh):
                for xx in range(ow):
                    for ch in range(c):
                        best = x[n, 2 * y, 2 * xx, ch]
                        arg = 0
                        for k in range(1, 4):
                            v = x[n, 2 * y + k // 2, 2 * xx + k % 2, ch]
                            if v > best:
                                best = v
                                arg = k
                        out[n, y, xx, ch] = best
                        idx[n, y, xx, ch] = arg
        return out, idx

    @njit(cache=True)
    def maxpool2_backward_numba(gout, idx):
        b, oh, ow, c = gout.shape
        dx = np.zeros((b, oh * 2, ow * 2, c), dtype=gout.dtype)
        for n in range(b):
            for y in range(oh):
                for xx in range(ow):
                    for ch in range(c):
                        k = idx[n, y, xx, ch]
                        dx[n, 2 * y + k // 2, 2 * xx + k % 2, ch] = gout[n, y, xx, ch]
        return dx

else:  # pragma: no cover
    im2col_numba = im2col_numpy
    col2im_numba = col2im_numpy
    maxpool2_forward_numba = maxpool2_forward_numpy
    maxpool2_backward_numba = maxpool2_backward_numpy


IMPLEMENTATIONS = {
    "numpy": (im2col_numpy, col2im_numpy, maxpool2_forward_numpy, maxpool2_backward_numpy),
    "numba": (im2col_numba, col2im_numba, maxpool2_forward_numba, maxpool2_backward_numba),
}

im2col, col2im, maxpool2_forward, maxpool2_backward = IMPLEMENTATIONS[BACKEND]
