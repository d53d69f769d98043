"""Finite-difference verification of analytic gradients."""

import numpy as np

from .tensor import AutodiffError, GraphError, Tensor, no_grad


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic grad of f w.r.t. x and central
    finite differences.

    ``f`` is a zero-argument callable that rebuilds the scalar output from
    the current contents of ``x.data``. The error for each element is
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    if x.data.dtype != np.float64:
        raise AutodiffError("grad_check requires 64-bit tensors")
    if not x.requires_grad:
        raise AutodiffError("grad_check input must require grad")

    x.zero_grad()
    out = f()
    if out.data.size != 1:
        raise GraphError(f"grad_check requires a scalar program, got shape {out.data.shape}")
    if not np.isfinite(out.data).all():
        raise AutodiffError("non-finite value at the unperturbed point")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if not np.isfinite(analytic).all():
        bad = tuple(int(v) for v in np.argwhere(~np.isfinite(analytic))[0])
        raise AutodiffError(f"non-finite analytic gradient at element {bad}")

    flat = x.data.reshape(-1)
    max_err = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                idx = tuple(int(v) for v in np.unravel_index(i, x.data.shape))
                raise AutodiffError(f"non-finite value while probing element {idx}")
            central = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            if err > max_err:
                max_err = err
    return float(max_err)
