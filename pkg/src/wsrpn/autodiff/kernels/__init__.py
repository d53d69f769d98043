"""Kernel backend selection.

The numba lane is used when available; set WSRPN_DISABLE_NUMBA=1 to force
the pure-numpy fallback. Both lanes expose the same kernels (im2col/col2im
for convolution, gelu_forward/gelu_backward for the activation) and produce
identical results.
"""

import os

_flag = os.environ.get("WSRPN_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false")

if not _disabled:
    try:
        from .numba_kernels import col2im, gelu_backward, gelu_forward, im2col
        _BACKEND = "numba"
    except ImportError:
        from .numpy_kernels import col2im, gelu_backward, gelu_forward, im2col
        _BACKEND = "numpy"
else:
    from .numpy_kernels import col2im, gelu_backward, gelu_forward, im2col
    _BACKEND = "numpy"


def backend_name() -> str:
    """Name of the active kernel lane ('numba' or 'numpy')."""
    return _BACKEND


__all__ = ["im2col", "col2im", "gelu_forward", "gelu_backward", "backend_name"]
