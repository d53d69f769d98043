"""Reverse-mode automatic differentiation over dense numpy arrays.

Graphs are built define-by-run: every primitive records a backward closure
on its output tensor, and ``backward()`` on a scalar output walks the
recorded closures once in reverse topological order. Graphs are rebuilt on
every forward pass; a tensor that has already been backpropagated through
rejects a second backward.

A tensor and the graph hanging off it are confined to a single thread
between forward and backward. Detached tensors (parameters between steps,
constants) carry no graph and may move freely between threads.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

GUARD_EPS = 1e-12

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class AutodiffError(Exception):
    """Base class for graph construction and execution errors."""


class ShapeMismatch(AutodiffError):
    """Incompatible operand shapes in a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            f"shape mismatch in '{op}': " + " vs ".join(str(s) for s in self.shapes)
        )


class GraphError(AutodiffError):
    """Invalid use of an autodiff graph (e.g. repeated backward)."""


def set_default_dtype(dtype) -> None:
    """Select the run-level float precision (np.float32 or np.float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default float precision."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(_DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense float array participating in a reverse-mode graph.

    ``grad`` has the same shape as ``data`` and is populated (accumulated)
    by backward passes; it is None until then.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev: tuple = ()
        self._backward_fn = None
        self._backward_ran = False

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward_ran = False
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._prev = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._prev = ()
            out._backward_fn = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar output, got shape {self.data.shape}")
        if self._backward_ran:
            raise GraphError("second backward without a new forward pass")
        if not self.requires_grad:
            raise GraphError("output does not require grad; nothing to backpropagate")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        self._backward_ran = True

    # -- elementwise binary ops ----------------------------------------------

    @staticmethod
    def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeMismatch(op, a.shape, b.shape) from None

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(_as_array(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        self._check_broadcast("add", self.data, other.data)
        data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        self._check_broadcast("sub", self.data, other.data)
        data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._make(data, (self, other), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_broadcast("mul", self.data, other.data)
        data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        """Division with the denominator clamped away from 0 by 1e-12."""
        other = self._coerce(other)
        self._check_broadcast("div", self.data, other.data)
        denom = other.data
        small = np.abs(denom) < GUARD_EPS
        if small.any():
            safe = np.where(small, np.where(denom < 0, -GUARD_EPS, GUARD_EPS), denom)
        else:
            safe = denom
        data = self.data / safe

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / safe, self.data.shape))
            if other.requires_grad:
                gb = np.where(small, 0.0, -g * self.data / (safe * safe))
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor._make(data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._make(-self.data, (self,), backward)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** p

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * p * self.data ** (p - 1))

        return Tensor._make(data, (self,), backward)

    # -- matmul ----------------------------------------------------------------

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch("matmul", a.shape, b.shape)
        if a.ndim > 2 or b.ndim > 2:
            try:
                np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
            except ValueError:
                raise ShapeMismatch("matmul", a.shape, b.shape) from None
        data = a @ b

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(b, -1, -2)
                self._accumulate(_unbroadcast(ga, a.shape))
            if other.requires_grad:
                gb = np.swapaxes(a, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._make(data, (self, other), backward)

    # -- elementwise unary ops ---------------------------------------------------

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * data)

        return Tensor._make(data, (self,), backward)

    def log(self):
        """Natural log with the argument clamped to at least 1e-12."""
        clamped = self.data < GUARD_EPS
        safe = np.maximum(self.data, GUARD_EPS)
        data = np.log(safe)

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.where(clamped, 0.0, g / safe))

        return Tensor._make(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / np.maximum(data, GUARD_EPS))

        return Tensor._make(data, (self,), backward)

    def abs(self):
        data = np.abs(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * np.sign(self.data))

        return Tensor._make(data, (self,), backward)

    def sigmoid(self):
        """Numerically stable logistic function."""
        x = self.data
        z = np.exp(-np.abs(x))
        data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * data * (1.0 - data))

        return Tensor._make(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - data * data))

        return Tensor._make(data, (self,), backward)

    def gelu(self):
        """Smooth GELU nonlinearity (tanh approximation)."""
        shape = self.data.shape
        x = np.ascontiguousarray(self.data).reshape(-1)
        out, t = kernels.gelu_forward(x)

        def backward(g):
            if self.requires_grad:
                gf = np.ascontiguousarray(g).reshape(-1)
                grad = kernels.gelu_backward(gf, x, t)
                self._accumulate(grad.reshape(shape))

        return Tensor._make(out.reshape(shape), (self,), backward)

    def clip(self, lo: float, hi: float):
        """Clamp values to [lo, hi]; gradient passes only in the interior."""
        data = np.clip(self.data, lo, hi)
        interior = (self.data > lo) & (self.data < hi)

        def backward(g):
            if self.requires_grad:
                self._accumulate(np.where(interior, g, 0.0))

        return Tensor._make(data, (self,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if self.requires_grad:
                gg = g
                if not keepdims and axis is not None:
                    gg = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        data = self.data.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if self.requires_grad:
                gg = g
                if not keepdims and axis is not None:
                    gg = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape) / count)

        return Tensor._make(data, (self,), backward)

    def max(self, axis=None, keepdims: bool = False):
        """Max reduction; on ties the gradient is split evenly."""
        data = self.data.max(axis=axis, keepdims=keepdims)
        expanded = data if (keepdims or axis is None) else np.expand_dims(data, axis)
        mask = (self.data == expanded).astype(self.data.dtype)
        counts = mask.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.requires_grad:
                gg = g
                if not keepdims and axis is not None:
                    gg = np.expand_dims(g, axis)
                self._accumulate(mask / counts * gg)

        return Tensor._make(data, (self,), backward)

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.requires_grad:
                dot = (g * data).sum(axis=axis, keepdims=True)
                self._accumulate(data * (g - dot))

        return Tensor._make(data, (self,), backward)

    # -- shape ops -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.data.shape))

        return Tensor._make(data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.data.ndim))[::-1]
        inv = np.argsort(axes)
        data = self.data.transpose(axes)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        return Tensor._make(data, (self,), backward)

    def broadcast_to(self, shape):
        shape = tuple(shape)
        try:
            data = np.broadcast_to(self.data, shape).copy()
        except ValueError:
            raise ShapeMismatch("broadcast_to", self.data.shape, shape) from None

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))

        return Tensor._make(data, (self,), backward)

    def __getitem__(self, idx):
        data = self.data[idx]

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[idx] += g
                self._accumulate(full)

        return Tensor._make(data, (self,), backward)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a tensor in the current default precision."""
    return Tensor(_as_array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    tensors = list(tensors)
    arrays = [t.data for t in tensors]
    base = arrays[0].shape
    for arr in arrays[1:]:
        if len(arr.shape) != len(base) or any(
            s != b for i, (s, b) in enumerate(zip(arr.shape, base)) if i != axis % len(base)
        ):
            raise ShapeMismatch("concat", *[a.shape for a in arrays])
    data = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    tensors = list(tensors)
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(t.reshape(shape))
    return concat(expanded, axis=axis)
