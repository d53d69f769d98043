"""ROI branch: learned query tokens attend over patch features, predict soft
boxes, pool features through generalized-Gaussian receptive fields, and
aggregate token probabilities with noisyOR/noisyAND.
"""

import numpy as np

from .autodiff import AutodiffError, Tensor, tensor
from .nn import LayerNorm, Linear, MLP, Module, MultiHeadCrossAttention
from .patch_branch import ImageProbs


class RoiAttention(Module):
    """Pre-norm residual stack: multi-head cross-attention from tokens to
    patches, an MLP, then a single-head cross-attention back over patches.
    """

    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.mha = MultiHeadCrossAttention(rng, d, heads)
        self.ln_mlp = LayerNorm(d)
        self.mlp = MLP(rng, d, 4 * d, d)
        self.ln_q2 = LayerNorm(d)
        self.ln_kv2 = LayerNorm(d)
        self.single = MultiHeadCrossAttention(rng, d, 1)

    def __call__(self, tokens: Tensor, patches: Tensor) -> Tensor:
        """tokens (B,K,d), patches (B,M,d) -> token features (B,K,d)."""
        x = tokens + self.mha(self.ln_q(tokens), self.ln_kv(patches))
        x = x + self.mlp(self.ln_mlp(x))
        x = x + self.single(self.ln_q2(x), self.ln_kv2(patches))
        return x


class BoxHead(Module):
    """Per-token box center in (0,1)^2 and size in (sigma_min, sigma_max],
    both via scaled sigmoids."""

    def __init__(self, rng: np.random.Generator, d: int,
                 sigma_min: float = 0.01, sigma_max: float = 0.5,
                 zero_init: bool = False):
        self.mu_head = Linear(rng, d, 2, zero_init=zero_init)
        self.sigma_head = Linear(rng, d, 2, zero_init=zero_init)
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max

    def __call__(self, feats: Tensor) -> tuple:
        mu = self.mu_head(feats).sigmoid()
        sigma = self.sigma_min + (self.sigma_max - self.sigma_min) * self.sigma_head(feats).sigmoid()
        return mu, sigma


def receptive_field(mu: Tensor, sigma: Tensor, h: int, w: int, beta: float = 2.0) -> Tensor:
    """Generalized-Gaussian attention map A of shape (B,K,h,w).

    A = exp(-0.5 |(cy - mu_y)/sigma_y|^beta) * exp(-0.5 |(cx - mu_x)/sigma_x|^beta)
    over patch centers cy=(row+0.5)/h, cx=(col+0.5)/w. Peak value is 1 when a
    patch center coincides with mu; beta=2 is the separable Gaussian case.
    """
    if beta < 1:
        raise ValueError(f"shape parameter beta must be >= 1, got {beta}")
    b, k, _ = mu.shape
    dt = mu.dtype
    cy = tensor(((np.arange(h) + 0.5) / h).reshape(1, 1, h, 1), dtype=dt)
    cx = tensor(((np.arange(w) + 0.5) / w).reshape(1, 1, 1, w), dtype=dt)
    mu_x = mu[..., 0].reshape(b, k, 1, 1)
    mu_y = mu[..., 1].reshape(b, k, 1, 1)
    sig_x = sigma[..., 0].reshape(b, k, 1, 1)
    sig_y = sigma[..., 1].reshape(b, k, 1, 1)
    ay = (((cy - mu_y) / sig_y).abs() ** beta * -0.5).exp()  # (b,k,h,1)
    ax = (((cx - mu_x) / sig_x).abs() ** beta * -0.5).exp()  # (b,k,1,w)
    return ay * ax


def soft_roi_pool(a: Tensor, grid: Tensor) -> Tensor:
    """Receptive-field-weighted average of patch features.

    a: (B,K,H,W), grid: (B,H,W,d) -> (B,K,d). Each token feature is
    sum(A * h) / sum(A) over the grid.
    """
    b, k, h, w = a.shape
    d = grid.shape[-1]
    flat_a = a.reshape(b, k, h * w)
    den = flat_a.sum(axis=-1, keepdims=True)
    if (den.data < 1e-12).any():
        raise AutodiffError(
            "soft_roi_pool: receptive field mass below 1e-12 (degenerate field)"
        )
    num = flat_a @ grid.reshape(b, h * w, d)
    return num / den


def noisy_pool(p: Tensor, mode: str, axis: int = -1) -> Tensor:
    """noisyOR (prob. any positive) or noisyAND (prob. all positive) along
    ``axis``, built from sequential products so boundary gradients are exact.
    """
    if mode not in ("or", "and"):
        raise ValueError(f"noisy_pool mode must be 'or' or 'and', got {mode!r}")
    ndim = p.ndim
    axis = axis % ndim
    order = (axis,) + tuple(i for i in range(ndim) if i != axis)
    q = p.transpose(order)  # pooled axis first
    n = q.shape[0]
    if mode == "or":
        acc = 1.0 - q[0]
        for i in range(1, n):
            acc = acc * (1.0 - q[i])
        return 1.0 - acc
    acc = q[0]
    for i in range(1, n):
        acc = acc * q[i]
    return acc


def aggregate_roi_image_probs(roi_probs: Tensor) -> ImageProbs:
    """Pool token probabilities (B,K,|C|+1) to image level: noisyOR for the
    classes and any-background, noisyAND for all-background."""
    nc = roi_probs.shape[-1] - 1
    classes = noisy_pool(roi_probs[..., :nc], "or", axis=1)   # (B, |C|)
    p_nf = roi_probs[..., nc]                                 # (B, K)
    return ImageProbs(
        classes=classes,
        all_nf=noisy_pool(p_nf, "and", axis=1),
        any_nf=noisy_pool(p_nf, "or", axis=1),
    )
