"""The five-component training loss.

total = patch BCE + patch supcon + ROI BCE + ROI supcon + patch-ROI
consistency. Each component can be switched off independently for
ablations; disabled components are reported as 0 and skipped entirely.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, tensor
from .model import ModelOutput
from .roi_branch import noisy_pool

PROB_FLOOR = 1e-12


def label_vector(labels: np.ndarray) -> np.ndarray:
    """Extend (B,|C|) binary labels with the two no-finding channels:
    all-background = 1 - max_c y_c, any-background = 1 always."""
    labels = np.asarray(labels, dtype=float)
    b = labels.shape[0]
    all_nf = 1.0 - labels.max(axis=1, keepdims=True)
    any_nf = np.ones((b, 1))
    return np.concatenate([labels, all_nf, any_nf], axis=1)


def bce_loss(probs: Tensor, targets: np.ndarray, weights: np.ndarray = None) -> Tensor:
    """Weighted multilabel binary cross entropy, probabilities clamped to
    [1e-12, 1-1e-12]. Mean over the batch of the weighted channel mean."""
    nchan = probs.shape[-1]
    if weights is None:
        weights = np.ones(nchan)
    weights = np.asarray(weights, dtype=float)
    y = tensor(targets, dtype=probs.dtype)
    w = tensor(weights / weights.sum(), dtype=probs.dtype)
    p = probs.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    ce = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    return (ce * w).sum(axis=-1).mean()


def per_class_features(features: Tensor, class_probs: Tensor, projection) -> Tensor:
    """Probability-weighted feature per class, then the shared projection.

    features: (B,U,d) patch or token features; class_probs: (B,U,|C|).
    Weights are p_uc / sum_u p_uc; a class whose probabilities sum below
    1e-12 falls back to uniform weights. Output (B,|C|,d).
    """
    b, u, _ = features.shape
    sums = class_probs.sum(axis=1, keepdims=True)              # (B,1,|C|)
    degenerate = (sums.data < 1e-12).astype(features.dtype.type)
    keep = tensor(1.0 - degenerate, dtype=features.dtype)
    fallback = tensor(degenerate / u, dtype=features.dtype)    # uniform 1/U
    w = class_probs / sums * keep + fallback                   # (B,U,|C|)
    pooled = w.transpose(0, 2, 1) @ features                   # (B,|C|,d)
    return projection(pooled)


def supcon_loss(features: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Supervised contrastive loss over per-class features.

    features: (B,|C|,d); labels: (B,|C|) in {0,1}. For each anchor (i,c) the
    positives are the other samples with the same label bit; the anchor is
    excluded from both the positive set and the softmax denominator.
    Anchors whose positive set is empty are skipped. Averaged by
    1/(B |C|) and 1/|positives|.
    """
    if tau <= 0:
        raise ValueError(f"supcon temperature must be positive, got {tau}")
    n, nc, _ = features.shape
    if n < 2:
        raise ValueError("supcon_loss requires a batch of at least 2")
    labels = np.asarray(labels)

    sq = (features * features).sum(axis=-1, keepdims=True)
    normed = features / sq.sqrt()
    f = normed.transpose(1, 0, 2)                      # (|C|, B, d)
    sim = (f @ f.transpose(0, 2, 1)) * (1.0 / tau)     # (|C|, B, B)

    same = labels.T[:, :, None] == labels.T[:, None, :]   # (|C|, B, B)
    eye = np.eye(n, dtype=bool)[None]
    pos = same & ~eye
    counts = pos.sum(axis=-1, keepdims=True)              # (|C|, B, 1)
    pos_w = np.where(counts > 0, pos / np.maximum(counts, 1), 0.0)

    offdiag_mask = np.broadcast_to(~eye, (nc, n, n))
    offdiag = tensor(offdiag_mask.astype(float), dtype=sim.dtype)
    # Max-shifted log denominator. The shift is a constant (it cancels
    # analytically, so gradients are unchanged) and keeps exp in range; with
    # a single off-diagonal element the shifted term is exactly zero, so the
    # loss collapses to exact 0 rather than accumulated rounding noise.
    shift = tensor(np.max(np.where(offdiag_mask, sim.data, -np.inf),
                          axis=-1, keepdims=True), dtype=sim.dtype)
    denom = (((sim - shift) * offdiag).exp() * offdiag).sum(axis=-1, keepdims=True)
    log_prob = sim - (denom.log() + shift)
    weighted = log_prob * tensor(pos_w, dtype=sim.dtype)
    return -weighted.sum() * (1.0 / (n * nc))


def roi_to_patch_class_map(fields: Tensor, roi_probs: Tensor) -> Tensor:
    """Project token probabilities onto the patch grid.

    fields: (B,K,H,W); roi_probs: (B,K,|C|+1), no-finding last. Class
    channels pool A*p over tokens with noisyOR; the no-finding channel pools
    A*p_nf + (1-A) with noisyAND, so unattended patches default to
    background. Output (B,H,W,|C|+1).
    """
    b, k, h, w = fields.shape
    nc = roi_probs.shape[-1] - 1
    a = fields.reshape(b, k, h, w, 1)
    p_cls = roi_probs[..., :nc].reshape(b, k, 1, 1, nc)
    p_nf = roi_probs[..., nc].reshape(b, k, 1, 1, 1)

    cls_map = noisy_pool(a * p_cls, "or", axis=1)              # (B,H,W,|C|)
    nf_map = noisy_pool(a * p_nf + (1.0 - a), "and", axis=1)   # (B,H,W,1)
    return concat([cls_map, nf_map], axis=-1)


def consistency_loss(patch_probs: Tensor, mapped_probs: Tensor) -> Tensor:
    """Mean over patches of the channel-summed Bernoulli KL between the
    patch map and the ROI-projected map, both clamped to [1e-12, 1-1e-12]."""
    p = patch_probs.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    q = mapped_probs.clip(PROB_FLOOR, 1.0 - PROB_FLOOR)
    kl = p * (p.log() - q.log()) + (1.0 - p) * ((1.0 - p).log() - (1.0 - q).log())
    return kl.sum(axis=-1).mean()


@dataclass
class LossConfig:
    tau: float = 0.1
    bce_weights: np.ndarray = None  # per-channel, length |C|+2; None = uniform
    patch_bce: bool = True
    patch_supcon: bool = True
    roi_bce: bool = True
    roi_supcon: bool = True
    consistency: bool = True

    def switches(self) -> dict:
        return {
            "patch_bce": self.patch_bce,
            "patch_supcon": self.patch_supcon,
            "roi_bce": self.roi_bce,
            "roi_supcon": self.roi_supcon,
            "consistency": self.consistency,
        }


COMPONENT_NAMES = ("patch_bce", "patch_supcon", "roi_bce", "roi_supcon", "consistency")


def total_loss(model, output: ModelOutput, labels: np.ndarray,
               cfg: LossConfig) -> tuple:
    """Sum of the enabled components plus a per-component breakdown.

    Returns (total: scalar Tensor, components: dict name -> float). The
    breakdown always contains all five names; disabled ones are 0.0.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 2 and (cfg.patch_supcon or cfg.roi_supcon):
        raise ValueError(
            "batch of 1 with a contrastive loss enabled; disable supcon or "
            "use paired augmentation to form positives"
        )
    nc = labels.shape[1]
    targets = label_vector(labels)
    parts = {}

    if cfg.patch_bce:
        parts["patch_bce"] = bce_loss(output.patch_image.vector(), targets, cfg.bce_weights)
    if cfg.roi_bce:
        parts["roi_bce"] = bce_loss(output.roi_image.vector(), targets, cfg.bce_weights)

    b, h, w, _ = output.patch_probs.shape
    if cfg.patch_supcon:
        flat_probs = output.patch_probs.reshape(b, h * w, nc + 1)[..., :nc]
        flat_feats = output.patch_grid.reshape(b, h * w, output.patch_grid.shape[-1])
        feats = per_class_features(flat_feats, flat_probs, model.projection)
        parts["patch_supcon"] = supcon_loss(feats, labels, cfg.tau)
    if cfg.roi_supcon:
        feats = per_class_features(output.roi_feats, output.roi_probs[..., :nc],
                                   model.projection)
        parts["roi_supcon"] = supcon_loss(feats, labels, cfg.tau)

    if cfg.consistency:
        mapped = roi_to_patch_class_map(output.fields, output.roi_probs)
        parts["consistency"] = consistency_loss(output.patch_probs, mapped)

    total = None
    breakdown = {}
    for name in COMPONENT_NAMES:
        if name in parts:
            breakdown[name] = parts[name].item()
            total = parts[name] if total is None else total + parts[name]
        else:
            breakdown[name] = 0.0
    if total is None:
        total = tensor(0.0, requires_grad=False)
    return total, breakdown
