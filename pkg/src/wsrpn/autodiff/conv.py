"""Convolution and pooling as autodiff operations.

Both use the im2col/col2im kernel lane (numba or numpy, see ``kernels``)
for data movement and BLAS matmul for the contraction.
"""

import numpy as np

from . import kernels
from .tensor import ShapeMismatch, Tensor


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2D cross-correlation of ``x`` (N,C,H,W) with ``weight`` (F,C,kh,kw).

    Zero padding of ``padding`` pixels per side; output is (N,F,oh,ow) with
    oh = (H + 2*padding - kh)//stride + 1.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeMismatch("conv2d", xd.shape, wd.shape)
    pad = int(padding)
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = xd.shape
    f, _, kh, kw = wd.shape
    if h < kh or w < kw:
        raise ShapeMismatch("conv2d", xd.shape, wd.shape)
    if bias is not None and bias.data.shape != (f,):
        raise ShapeMismatch("conv2d.bias", bias.data.shape, (f,))
    sh = sw = int(stride)
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1

    cols = kernels.im2col(xd, kh, kw, sh, sw, oh, ow)  # (n*oh*ow, c*kh*kw)
    wmat = wd.reshape(f, -1).T                         # (c*kh*kw, f)
    out = cols @ wmat                                  # (n*oh*ow, f)
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(f, c, kh, kw)
            weight._accumulate(gw)
        if x.requires_grad:
            gcols = gmat @ wmat.T
            gx = kernels.col2im(gcols, n, c, h, w, kh, kw, sh, sw, oh, ow)
            if pad:
                gx = gx[:, :, pad:h - pad, pad:w - pad]
            x._accumulate(gx)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))

    return Tensor._make(np.ascontiguousarray(out), parents, backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k average pooling of (N,C,H,W)."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeMismatch("avg_pool2d", x.data.shape, (n, c, k, k))
    oh, ow = h // k, w // k
    data = x.data.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                g[:, :, :, None, :, None] / (k * k), (n, c, oh, k, ow, k)
            ).reshape(n, c, h, w)
            x._accumulate(gx)

    return Tensor._make(data, (x,), backward)
