"""Patch branch: CNN backbone to a patch grid, no-finding-gated patch
classification, and LSE aggregation to image-level probabilities.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import AutodiffError, Tensor, avg_pool2d, concat, tensor
from .nn import Conv2d, Module


def position_encoding(h: int, w: int, d: int) -> np.ndarray:
    """2D cosine position encodings of shape (h, w, d).

    The first d/2 channels encode the row index, the last d/2 the column
    index, each with sin/cos interleaved over geometrically spaced
    frequencies. Depends only on (row, col, d); patch (0,0) encodes to
    [0, 1, 0, 1, ...].
    """
    if d % 4:
        raise ValueError(f"model dim {d} must be divisible by 4 for 2D encodings")
    half = d // 2

    def axis_encoding(n):
        pos = np.arange(n)[:, None]
        i = np.arange(half // 2)[None, :]
        omega = 10000.0 ** (-2.0 * i / half)
        pe = np.zeros((n, half))
        pe[:, 0::2] = np.sin(pos * omega)
        pe[:, 1::2] = np.cos(pos * omega)
        return pe

    pe_y = axis_encoding(h)[:, None, :]  # (h, 1, half)
    pe_x = axis_encoding(w)[None, :, :]  # (1, w, half)
    out = np.concatenate(
        [np.broadcast_to(pe_y, (h, w, half)), np.broadcast_to(pe_x, (h, w, half))],
        axis=-1,
    )
    return out


class Backbone(Module):
    """Small CNN: stride-2 3x3 stages, optional final 2x2 average pooling,
    then a per-patch linear projection to d plus position encodings.

    Total stride is 2^len(channels), doubled when final_pool is set.
    """

    def __init__(self, rng: np.random.Generator, channels: tuple, d: int,
                 final_pool: bool = False, in_channels: int = 1):
        self.stages = []
        prev = in_channels
        for ch in channels:
            self.stages.append(Conv2d(rng, prev, ch, kernel=3, stride=2, padding=1))
            prev = ch
        k = 1.0 / np.sqrt(prev)
        self.proj_weight = tensor(rng.uniform(-k, k, (prev, d)), requires_grad=True)
        self.proj_bias = tensor(rng.uniform(-k, k, d), requires_grad=True)
        self.final_pool = final_pool
        self.d = d
        self.stride = 2 ** len(channels) * (2 if final_pool else 1)
        self._pe_cache = {}

    def __call__(self, x: Tensor) -> Tensor:
        """Encode normalized images (B,1,S,S) into a patch grid (B,H,W,d)."""
        s1, s2 = x.shape[-2], x.shape[-1]
        if s1 != s2:
            raise ValueError(f"expected a square image, got {s1}x{s2}")
        if s1 % self.stride:
            raise ValueError(
                f"image side {s1} not divisible by backbone stride {self.stride}"
            )
        h = x
        for conv in self.stages:
            h = conv(h).gelu()
        if self.final_pool:
            h = avg_pool2d(h, 2)
        b, ch, gh, gw = h.shape
        grid = h.transpose(0, 2, 3, 1) @ self.proj_weight + self.proj_bias

        key = (gh, gw, str(grid.dtype))
        if key not in self._pe_cache:
            self._pe_cache[key] = tensor(
                position_encoding(gh, gw, self.d)[None], dtype=grid.dtype
            )
        return grid + self._pe_cache[key]


def classify_with_nofinding(features: Tensor, classifier) -> tuple:
    """Class probabilities gated by the no-finding channel.

    ``classifier`` maps (..., d) to |C|+1 logits with the no-finding channel
    last. Returns (probs, logits) where probs has p_nf = sigmoid(z_nf) and
    p_c = (1 - p_nf) * sigmoid(z_c), so p_c <= 1 - p_nf by construction.
    """
    logits = classifier(features)
    nc = logits.shape[-1] - 1
    p_nf = logits[..., nc:].sigmoid()
    p_cls = (1.0 - p_nf) * logits[..., :nc].sigmoid()
    return concat([p_cls, p_nf], axis=-1), logits


def lse_pool(values: Tensor, r: float) -> Tensor:
    """Smooth-max pooling over the last two axes:
    (1/r) log( (1/(H W)) sum exp(r v) ), computed with the max shifted out
    for stability. Shape (..., H, W) -> (...).
    """
    if r <= 0:
        raise ValueError(f"LSE scale r must be positive, got {r}")
    h, w = values.shape[-2], values.shape[-1]
    if h * w == 0:
        raise AutodiffError("lse_pool: empty grid")
    flat = values.reshape(*values.shape[:-2], h * w)
    m = flat.max(axis=-1, keepdims=True)
    shifted = ((flat - m) * r).exp().mean(axis=-1, keepdims=True)
    out = m + shifted.log() * (1.0 / r)
    return out.reshape(values.shape[:-2])


@dataclass
class ImageProbs:
    """Per-image probabilities: one per class plus the two no-finding
    aggregates (all background, any background)."""

    classes: Tensor   # (B, |C|)
    all_nf: Tensor    # (B,)
    any_nf: Tensor    # (B,)

    def vector(self) -> Tensor:
        """Channels [classes..., all_nf, any_nf] as a (B, |C|+2) tensor."""
        b, nc = self.classes.shape
        return concat(
            [self.classes, self.all_nf.reshape(b, 1), self.any_nf.reshape(b, 1)],
            axis=-1,
        )


def aggregate_patch_image_probs(probs: Tensor, r: float) -> ImageProbs:
    """LSE-pool patch probabilities (B,H,W,|C|+1) to image level.

    Classes and any-background pool directly; all-background pools the
    inverted no-finding map and inverts back, so that one finding patch is
    enough to pull it down.
    """
    nc = probs.shape[-1] - 1
    chan_first = probs.transpose(0, 3, 1, 2)        # (B, |C|+1, H, W)
    pooled = lse_pool(chan_first, r)                # (B, |C|+1)
    inv_nf = 1.0 - probs[..., nc]                   # (B, H, W)
    all_nf = 1.0 - lse_pool(inv_nf, r)
    return ImageProbs(classes=pooled[:, :nc], all_nf=all_nf, any_nf=pooled[:, nc])
