"""Pure-numpy fallback kernels for convolution data movement.

Functionally identical to the numba lane; selected when numba is disabled
or unavailable.
"""

import numpy as np


def im2col(x, kh, kw, sh, sw, oh, ow):
    """Gather conv patches of ``x`` (N,C,H,W) into (N*oh*ow, C*kh*kw)."""
    n = x.shape[0]
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, ::sh, ::sw]  # (n, c, oh, ow, kh, kw)
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, oh, ow):
    """Scatter-add column gradients (N*oh*ow, C*kh*kw) back to (N,C,H,W)."""
    x = np.zeros((n, c, h, w), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    # For a fixed kernel offset the strided targets are disjoint, so each
    # += below is alias-free even when windows overlap.
    for ky in range(kh):
        for kx in range(kw):
            x[:, :, ky:ky + sh * oh:sh, kx:kx + sw * ow:sw] += cols6[:, :, :, :, ky, kx]
    return x


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_forward(x):
    """Tanh-approximation GELU over a flat array.

    Returns ``(out, t)`` where ``t = tanh(c * (x + a * x^3))`` is kept for
    the backward pass.
    """
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(g, x, t):
    """Gradient of the tanh-approximation GELU, fused over flat arrays."""
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
