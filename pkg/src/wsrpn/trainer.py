"""Training loop: AdamW with gradient clipping, periodic validation mAP,
best-checkpoint selection, early stopping, and a per-step loss-component
log. Includes the box-supervised upper-bound mode used to establish that a
synthetic task is learnable before the weakly supervised run is scored.
"""

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, set_default_dtype, tensor
from .checkpoint import save_checkpoint
from .data import augment, compute_norm_stats, strip_boxes
from .losses import LossConfig, label_vector, total_loss
from .metrics import average_precision, extract_detections, top1_per_class
from .model import ModelConfig, WSRPN
from .optim import AdamW, clip_grad_norm

LOG_COLUMNS = ["step", "L_total", "L^P_bce", "L^P_supcon", "L^R_bce",
               "L^R_supcon", "L^{P<->R}", "val_mAP"]
_COMPONENT_ORDER = ("patch_bce", "patch_supcon", "roi_bce", "roi_supcon",
                    "consistency")


class TrainingError(Exception):
    """Aborted training run (non-finite loss, bad configuration)."""


@dataclass
class TrainConfig:
    """Training and architecture hyperparameters.

    Defaults are the desk-scale profile; ``paper_scale`` switches to the
    full-size profile (d=128, 224px images, batch 128, 50000 iterations).
    """

    num_classes: int = 2
    image_size: int = 112
    d: int = 64
    channels: tuple = (16, 32, 64, 64)
    final_pool: bool = False
    heads: int = 8
    K: int = 10
    r: float = 5.0
    beta: float = 2.0
    tau: float = 0.1
    gamma: float = 2.0
    sigma_min: float = 0.01
    sigma_max: float = 0.5
    lr: float = 1.5e-4
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    batch_size: int = 32          # images per step; two views each
    max_iters: int = 5000
    patience: int = 1000
    eval_interval: int = 250
    seed: int = 0
    precision: int = 32           # 32 or 64
    bce_weighting: str = "uniform"  # or "inverse_frequency"
    patch_bce: bool = True
    patch_supcon: bool = True
    roi_bce: bool = True
    roi_supcon: bool = True
    consistency: bool = True
    supervised: bool = False      # box-supervised upper-bound mode

    @staticmethod
    def paper_scale(**overrides) -> "TrainConfig":
        base = dict(
            image_size=224, d=128, channels=(32, 64, 128, 128), final_pool=True,
            K=10, batch_size=128, max_iters=50000, patience=10000,
            eval_interval=1000,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def validate(self) -> None:
        for name in ("lr", "clip_norm", "batch_size", "max_iters", "patience",
                     "eval_interval", "tau", "gamma", "r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.batch_size < 2 and (self.patch_supcon or self.roi_supcon):
            raise ValueError("batch_size must be >= 2 when supcon is enabled")
        if self.bce_weighting not in ("uniform", "inverse_frequency"):
            raise ValueError(f"unknown bce_weighting {self.bce_weighting!r}")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            d=self.d,
            image_size=self.image_size,
            channels=tuple(self.channels),
            final_pool=self.final_pool,
            heads=self.heads,
            num_tokens=self.K,
            r=self.r,
            beta=self.beta,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            gamma=self.gamma,
            seed=self.seed,
        )

    def loss_config(self, train_labels: np.ndarray = None) -> LossConfig:
        weights = None
        if self.bce_weighting == "inverse_frequency" and train_labels is not None:
            targets = label_vector(train_labels)
            pos = targets.mean(axis=0)
            weights = 1.0 / np.clip(pos, 0.05, 1.0)
        return LossConfig(
            tau=self.tau,
            bce_weights=weights,
            patch_bce=self.patch_bce,
            patch_supcon=self.patch_supcon,
            roi_bce=self.roi_bce,
            roi_supcon=self.roi_supcon,
            consistency=self.consistency,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(d["channels"])
        return d

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        data = dict(data)
        if "channels" in data:
            data["channels"] = tuple(data["channels"])
        return TrainConfig(**data)


@dataclass
class TrainResult:
    model: WSRPN
    checkpoint_path: str
    log_path: str
    best_val_map: float
    best_iteration: int
    iterations_run: int
    norm_stats: tuple
    log_rows: list = field(default_factory=list)


def _normalize(image: np.ndarray, stats: tuple, dtype) -> np.ndarray:
    mean, std = stats
    return ((image - mean) / max(std, 1e-8)).astype(dtype)


def predict_detections(model: WSRPN, images: np.ndarray, stats: tuple,
                       batch_size: int = 64) -> list:
    """Detections (after top1-per-class) for raw [0,1] images (N,S,S)."""
    cfg = model.config
    dtype = model.tokens.data.dtype
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            batch = np.stack([_normalize(im, stats, dtype) for im in chunk])
            result = model(tensor(batch[:, None, :, :]))
            mu = result.mu.data
            sigma = result.sigma.data
            probs = result.roi_probs.data
            for i in range(len(chunk)):
                dets = extract_detections(mu[i], sigma[i], probs[i], gamma=cfg.gamma)
                out.append(top1_per_class(dets))
    return out


def evaluate_map(model: WSRPN, samples: list, stats: tuple,
                 iou_threshold: float = 0.3, batch_size: int = 64) -> float:
    """Validation mAP at one IoU threshold."""
    if not samples:
        raise TrainingError("evaluation split is empty")
    images = np.stack([s.image for s in samples])
    dets = predict_detections(model, images, stats, batch_size)
    gts = [s.boxes for s in samples]
    _, m_ap = average_precision(dets, gts, iou_threshold)
    return m_ap


def _supervised_loss(output, labels: np.ndarray, boxes_per_sample: list,
                     cfg: TrainConfig) -> Tensor:
    """Box-supervised upper-bound objective.

    Token k is assigned to class k (requires K >= |C|). Assigned tokens with
    a ground-truth box regress their center and size (sigma target =
    extent/(2 gamma)) and classify as their class; all other tokens target
    no-finding. This uses boxes directly and exists only to upper-bound what
    the weakly supervised run can reach.
    """
    b, k, _ = output.mu.shape
    nc = labels.shape[1]
    if k < nc:
        raise TrainingError(f"supervised mode needs K >= num_classes, got {k} < {nc}")
    dtype = output.mu.dtype.type

    mu_t = np.zeros((b, k, 2), dtype=dtype)
    sig_t = np.full((b, k, 2), 0.2, dtype=dtype)
    box_mask = np.zeros((b, k, 1), dtype=dtype)
    cls_t = np.zeros((b, k, nc + 1), dtype=dtype)
    cls_t[:, :, nc] = 1.0
    for i, boxes in enumerate(boxes_per_sample):
        for box in boxes:
            t = box.cls
            mu_t[i, t] = (box.cx, box.cy)
            sig_t[i, t] = (box.w / (2 * cfg.gamma), box.h / (2 * cfg.gamma))
            box_mask[i, t] = 1.0
            cls_t[i, t, nc] = 0.0
            cls_t[i, t, t] = 1.0

    mask = tensor(box_mask)
    nboxes = max(float(box_mask.sum()), 1.0)
    dmu = output.mu - tensor(mu_t)
    dsig = output.sigma - tensor(sig_t)
    reg = ((dmu * dmu + dsig * dsig) * mask).sum() * (1.0 / nboxes)

    p = output.roi_probs.clip(1e-12, 1.0 - 1e-12)
    y = tensor(cls_t)
    ce = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    return reg * 10.0 + ce.mean()


def _build_batch(samples: list, idx: np.ndarray, stats: tuple, rng,
                 dtype, two_views: bool) -> tuple:
    """Stack normalized images and labels; optionally two augmented views
    per image (views concatenated, labels repeated)."""
    images = []
    labels = []
    for i in idx:
        s = samples[i]
        if two_views:
            images.append(_normalize(augment(s.image, rng), stats, dtype))
        else:
            images.append(_normalize(s.image, stats, dtype))
        labels.append(s.labels)
    if two_views:
        for i in idx:
            s = samples[i]
            images.append(_normalize(augment(s.image, rng), stats, dtype))
            labels.append(s.labels)
    x = np.stack(images)[:, None, :, :]
    return x, np.asarray(labels)


def train(config: TrainConfig, dataset, out_dir) -> TrainResult:
    """Run the training loop on a loaded Dataset and write artifacts to
    ``out_dir``: training_log.csv and best.ckpt (highest validation mAP).
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    dtype = np.float64 if config.precision == 64 else np.float32
    set_default_dtype(dtype)

    train_split = dataset.split("train")
    val_split = dataset.split("val")
    if not train_split:
        raise TrainingError("training split is empty")
    if not val_split or not any(s.boxes for s in val_split):
        raise TrainingError("validation split needs samples with boxes for mAP")

    config.num_classes = len(dataset.classes)
    stats = compute_norm_stats(train_split)
    train_labels = np.stack([s.labels for s in train_split])
    loss_cfg = config.loss_config(train_labels)
    # The weakly supervised path sees only box-free samples; the supervised
    # upper-bound harness is the single sanctioned exception.
    boxes_by_id = {s.image_id: s.boxes for s in train_split} if config.supervised else {}
    train_samples = strip_boxes(train_split)

    model = WSRPN(config.model_config())
    params = model.named_parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    ckpt_path = out / "best.ckpt"
    log_path = out / "training_log.csv"
    best_map = -1.0
    best_iter = 0
    log_rows = []
    order = np.array([], dtype=int)
    started = time.time()

    def save_best(iteration):
        save_checkpoint(
            ckpt_path,
            {k: p.data for k, p in params.items()},
            opt_state=opt.state(),
            config=config.to_dict(),
            norm_stats=stats,
            iteration=iteration,
            best_val_map=best_map,
        )

    with open(log_path, "w", newline="") as log_file:
        log = csv.writer(log_file)
        log.writerow(LOG_COLUMNS)

        step = 0
        while step < config.max_iters:
            step += 1
            if len(order) < config.batch_size:
                order = np.concatenate([order, rng.permutation(len(train_samples))])
            idx, order = order[:config.batch_size], order[config.batch_size:]

            if config.supervised:
                x, labels = _build_batch(train_samples, idx, stats, rng, dtype,
                                         two_views=False)
                boxes = [boxes_by_id[train_samples[i].image_id] for i in idx]
                output = model(tensor(x))
                loss = _supervised_loss(output, labels, boxes, config)
                comps = {name: 0.0 for name in _COMPONENT_ORDER}
            else:
                x, labels = _build_batch(train_samples, idx, stats, rng, dtype,
                                         two_views=True)
                output = model(tensor(x))
                loss, comps = total_loss(model, output, labels, loss_cfg)

            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss at step {step}: total={loss_val}, "
                    f"components={comps}"
                )
            loss.backward()
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            opt.zero_grad()

            val_map_cell = ""
            if step % config.eval_interval == 0 or step == config.max_iters:
                val_map = evaluate_map(model, val_split, stats)
                val_map_cell = f"{val_map:.6f}"
                if val_map > best_map:
                    best_map = val_map
                    best_iter = step
                    save_best(step)

            row = [step, f"{loss_val:.6f}"] + [
                f"{comps[name]:.6f}" for name in _COMPONENT_ORDER
            ] + [val_map_cell]
            log.writerow(row)
            log_rows.append(row)

            if step - best_iter >= config.patience and best_map >= 0.0 and best_iter > 0:
                break

    if best_map < 0:  # no eval ever ran (max_iters < eval_interval)
        best_map = evaluate_map(model, val_split, stats)
        best_iter = step
        save_best(step)

    elapsed = time.time() - started
    return TrainResult(
        model=model,
        checkpoint_path=str(ckpt_path),
        log_path=str(log_path),
        best_val_map=best_map,
        best_iteration=best_iter,
        iterations_run=step,
        norm_stats=stats,
        log_rows=log_rows,
    )


def load_model(checkpoint) -> WSRPN:
    """Rebuild a model from a loaded Checkpoint."""
    config = TrainConfig.from_dict(checkpoint.config)
    dtype = np.float64 if config.precision == 64 else np.float32
    set_default_dtype(dtype)
    model = WSRPN(config.model_config())
    model.load_state(checkpoint.params)
    return model
