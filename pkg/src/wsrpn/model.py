"""The full two-branch model: patch branch and ROI branch share one
classifier and one contrastive projection head.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, tensor
from .nn import MLP, Module
from .patch_branch import (
    Backbone,
    ImageProbs,
    aggregate_patch_image_probs,
    classify_with_nofinding,
)
from .roi_branch import (
    BoxHead,
    RoiAttention,
    aggregate_roi_image_probs,
    receptive_field,
    soft_roi_pool,
)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale profile (d=64, 112px input, stride 16);
    ``paper_scale`` returns the full-size profile (d=128, 224px, stride 32).
    """

    num_classes: int
    d: int = 64
    image_size: int = 112
    channels: tuple = (16, 32, 64, 64)
    final_pool: bool = False
    heads: int = 8
    num_tokens: int = 10
    r: float = 5.0
    beta: float = 2.0
    sigma_min: float = 0.01
    sigma_max: float = 0.5
    gamma: float = 2.0
    seed: int = 0

    @staticmethod
    def paper_scale(num_classes: int, **overrides) -> "ModelConfig":
        base = dict(
            num_classes=num_classes,
            d=128,
            image_size=224,
            channels=(32, 64, 128, 128),
            final_pool=True,
            heads=8,
            num_tokens=10,
        )
        base.update(overrides)
        return ModelConfig(**base)

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.d % 4:
            raise ValueError(f"model dim {self.d} must be divisible by 4")
        if self.d % self.heads:
            raise ValueError(f"model dim {self.d} not divisible by {self.heads} heads")
        if not (0 < self.sigma_min < self.sigma_max <= 1):
            raise ValueError("need 0 < sigma_min < sigma_max <= 1")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.r <= 0:
            raise ValueError("r must be positive")


@dataclass
class ModelOutput:
    """Everything the losses and inference need from one forward pass."""

    patch_grid: Tensor      # (B, H, W, d)
    patch_logits: Tensor    # (B, H*W, |C|+1)
    patch_probs: Tensor     # (B, H, W, |C|+1), no-finding last
    patch_image: ImageProbs
    token_feats: Tensor     # (B, K, d)
    mu: Tensor              # (B, K, 2), (x, y)
    sigma: Tensor           # (B, K, 2), (x, y)
    fields: Tensor          # (B, K, H, W)
    roi_feats: Tensor       # (B, K, d)
    roi_logits: Tensor      # (B, K, |C|+1)
    roi_probs: Tensor       # (B, K, |C|+1)
    roi_image: ImageProbs
    grid_hw: tuple = field(default=(0, 0))


class WSRPN(Module):
    """Patch branch + ROI branch with shared classifier and projection."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.backbone = Backbone(rng, c.channels, c.d, final_pool=c.final_pool)
        self.tokens = tensor(rng.normal(0.0, 0.02, (c.num_tokens, c.d)),
                             requires_grad=True)
        self.roi_attn = RoiAttention(rng, c.d, c.heads)
        self.box_head = BoxHead(rng, c.d, c.sigma_min, c.sigma_max)
        self.classifier = MLP(rng, c.d, c.d, c.num_classes + 1)
        self.projection = MLP(rng, c.d, c.d, c.d)

    def __call__(self, x: Tensor) -> ModelOutput:
        """x: normalized images (B, 1, S, S)."""
        c = self.config
        grid = self.backbone(x)                       # (B, H, W, d)
        b, h, w, d = grid.shape
        flat = grid.reshape(b, h * w, d)

        patch_probs_flat, patch_logits = classify_with_nofinding(flat, self.classifier)
        patch_probs = patch_probs_flat.reshape(b, h, w, c.num_classes + 1)
        patch_image = aggregate_patch_image_probs(patch_probs, c.r)

        tokens = self.tokens.reshape(1, c.num_tokens, d).broadcast_to((b, c.num_tokens, d))
        token_feats = self.roi_attn(tokens, flat)
        mu, sigma = self.box_head(token_feats)
        fields = receptive_field(mu, sigma, h, w, beta=c.beta)
        roi_feats = soft_roi_pool(fields, grid)
        roi_probs, roi_logits = classify_with_nofinding(roi_feats, self.classifier)
        roi_image = aggregate_roi_image_probs(roi_probs)

        return ModelOutput(
            patch_grid=grid,
            patch_logits=patch_logits,
            patch_probs=patch_probs,
            patch_image=patch_image,
            token_feats=token_feats,
            mu=mu,
            sigma=sigma,
            fields=fields,
            roi_feats=roi_feats,
            roi_logits=roi_logits,
            roi_probs=roi_probs,
            roi_image=roi_image,
            grid_hw=(h, w),
        )
