"""Reverse-mode autodiff engine: tensors, conv kernels, grad checking."""

from .conv import avg_pool2d, conv2d
from .gradcheck import grad_check
from .kernels import backend_name
from .tensor import (
    GUARD_EPS,
    AutodiffError,
    GraphError,
    ShapeMismatch,
    Tensor,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    stack,
    tensor,
)

__all__ = [
    "Tensor",
    "tensor",
    "concat",
    "stack",
    "no_grad",
    "default_dtype",
    "set_default_dtype",
    "get_default_dtype",
    "GUARD_EPS",
    "AutodiffError",
    "ShapeMismatch",
    "GraphError",
    "conv2d",
    "avg_pool2d",
    "grad_check",
    "backend_name",
]
