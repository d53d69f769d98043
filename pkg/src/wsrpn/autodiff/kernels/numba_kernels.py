"""Numba-compiled kernels: convolution data movement and the fused GELU.

The conv GEMM itself stays in BLAS (np.matmul); im2col/col2im only gather
input patches into column matrices and scatter column gradients back. That
split beats a fused njit convolution loop by a wide margin on CPU. GELU is
the other hot spot (it runs on every backbone stage output), so its forward
and backward are single fused passes over flat arrays here.
"""

import math

import numpy as np
from numba import njit

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


@njit(cache=True)
def im2col(x, kh, kw, sh, sw, oh, ow):
    """Gather conv patches of ``x`` (N,C,H,W) into (N*oh*ow, C*kh*kw)."""
    n, c, h, w = x.shape
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=x.dtype)
    for i in range(n):
        for oy in range(oh):
            iy0 = oy * sh
            for ox in range(ow):
                ix0 = ox * sw
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            cols[i, oy, ox, ci, ky, kx] = x[i, ci, iy0 + ky, ix0 + kx]
    return cols.reshape(n * oh * ow, c * kh * kw)


@njit(cache=True)
def col2im(cols, n, c, h, w, kh, kw, sh, sw, oh, ow):
    """Scatter-add column gradients (N*oh*ow, C*kh*kw) back to (N,C,H,W)."""
    x = np.zeros((n, c, h, w), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(n):
        for oy in range(oh):
            iy0 = oy * sh
            for ox in range(ow):
                ix0 = ox * sw
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            x[i, ci, iy0 + ky, ix0 + kx] += cols6[i, oy, ox, ci, ky, kx]
    return x


@njit(cache=True)
def gelu_forward(x):
    """Tanh-approximation GELU over a flat array.

    Returns ``(out, t)`` where ``t = tanh(c * (x + a * x^3))`` is kept for
    the backward pass.
    """
    n = x.size
    out = np.empty(n, dtype=x.dtype)
    t = np.empty(n, dtype=x.dtype)
    for i in range(n):
        v = x[i]
        th = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
        t[i] = th
        out[i] = 0.5 * v * (1.0 + th)
    return out, t


@njit(cache=True)
def gelu_backward(g, x, t):
    """Gradient of the tanh-approximation GELU, fused over flat arrays."""
    n = x.size
    grad = np.empty(n, dtype=x.dtype)
    for i in range(n):
        v = x[i]
        th = t[i]
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        grad[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
    return grad
