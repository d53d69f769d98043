"""Neural-network building blocks on top of the autodiff engine.

Modules hold named parameter tensors; ``named_parameters`` walks nested
modules and lists so every parameter has a stable dotted name for the
optimizer and the checkpoint format.
"""

import numpy as np

from .autodiff import Tensor, conv2d, tensor


class Module:
    """Base class providing recursive named-parameter discovery."""

    def named_parameters(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for k, v in val.named_parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.named_parameters().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def load_state(self, state: dict, prefix: str = "") -> None:
        """Copy arrays from ``state`` (name -> ndarray) into parameters."""
        params = self.named_parameters()
        for name, param in params.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter '{key}' in state")
            arr = np.asarray(state[key])
            if arr.shape != param.data.shape:
                raise ValueError(
                    f"parameter '{key}': shape {arr.shape} != {param.data.shape}"
                )
            param.data = arr.astype(param.data.dtype, copy=True)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = _uniform_init(rng, (in_dim, out_dim), in_dim)
        self.weight = tensor(w, requires_grad=True)
        self.bias = None
        if bias:
            b = np.zeros(out_dim) if zero_init else _uniform_init(rng, (out_dim,), in_dim)
            self.bias = tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 kernel: int, stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        self.weight = tensor(
            _uniform_init(rng, (out_ch, in_ch, kernel, kernel), fan_in),
            requires_grad=True,
        )
        self.bias = tensor(_uniform_init(rng, (out_ch,), fan_in), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = tensor(np.ones(dim), requires_grad=True)
        self.beta = tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        m = x.mean(axis=-1, keepdims=True)
        d = x - m
        v = (d * d).mean(axis=-1, keepdims=True)
        return d / (v + self.eps).sqrt() * self.gamma + self.beta


class MLP(Module):
    """Two-layer perceptron with a smooth GELU nonlinearity."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int):
        self.fc1 = Linear(rng, in_dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(dh)) v over the last two axes.

    q: (..., Q, dh), k/v: (..., M, dh) -> (..., Q, dh). Each output row is a
    convex combination of the rows of v.
    """
    dh = q.shape[-1]
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (1.0 / np.sqrt(dh))
    return scores.softmax(axis=-1) @ v


class MultiHeadCrossAttention(Module):
    """Cross-attention: queries from one set, keys/values from another."""

    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by head count {heads}")
        self.heads = heads
        # Projections are bias-free as in the original transformer. A key
        # bias in particular would be dead weight: softmax scores are
        # invariant to a constant shift per query row, so its gradient is
        # identically zero.
        self.wq = Linear(rng, d, d, bias=False)
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.wo = Linear(rng, d, d)

    def __call__(self, queries: Tensor, kv: Tensor) -> Tensor:
        b, nq, d = queries.shape
        m = kv.shape[1]
        h = self.heads
        dh = d // h

        def split(x, n):
            return x.reshape(b, n, h, dh).transpose(0, 2, 1, 3)  # (b, h, n, dh)

        q = split(self.wq(queries), nq)
        k = split(self.wk(kv), m)
        v = split(self.wv(kv), m)
        out = scaled_dot_attention(q, k, v)          # (b, h, nq, dh)
        out = out.transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.wo(out)
