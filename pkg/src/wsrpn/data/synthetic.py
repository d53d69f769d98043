"""Synthetic blob dataset with exact bounding boxes.

Each class renders a visually distinct pattern inside a square window —
bright bump, ring, oriented stripes, dark spot — over a noisy low-frequency
background. The window is the ground-truth box, so boxes are tight by
construction, and an image never carries two blobs of one class.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..metrics import GroundTruthBox
from .io import Sample, write_boxes_csv, write_labels_csv, write_pgm, write_splits_csv


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    image_size: int = 112
    box_count_probs: tuple = None     # P(0..m blobs); default caps m at 3
    blob_size_range: tuple = (0.2, 0.4)  # relative to image side
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.box_count_probs is None:
            base = (0.25, 0.45, 0.2, 0.1)[:min(3, self.num_classes) + 1]
            total = sum(base)
            self.box_count_probs = tuple(p / total for p in base)

    def validate(self) -> None:
        s = self.image_size
        lo, hi = self.blob_size_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"blob_size_range {self.blob_size_range} not in (0,1]")
        if int(lo * s) < 8:
            raise ValueError(
                f"blob size {lo}x{s}px too small for distinct patterns (min 8px)"
            )
        if len(self.box_count_probs) > self.num_classes + 1:
            raise ValueError(
                "box_count_probs allows more blobs than distinct classes"
            )
        if abs(sum(self.box_count_probs) - 1.0) > 1e-9:
            raise ValueError("box_count_probs must sum to 1")


def _pattern(cls: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Signed intensity pattern for one blob, zero outside a soft window."""
    u = (np.arange(side) + 0.5) / side * 2.0 - 1.0   # [-1, 1]
    yy, xx = np.meshgrid(u, u, indexing="ij")
    rho2 = xx * xx + yy * yy
    window = np.clip(1.0 - rho2, 0.0, 1.0)
    amp = rng.uniform(0.35, 0.55)
    kind = cls % 4
    variant = cls // 4
    if kind == 0:      # bright bump
        pat = amp * np.exp(-3.0 * rho2)
    elif kind == 1:    # ring
        rho = np.sqrt(rho2)
        pat = amp * np.exp(-((rho - 0.55) ** 2) / 0.02)
    elif kind == 2:    # oriented stripes
        freq = 3.0 + variant
        pat = amp * np.sin(2.0 * np.pi * freq * (xx + yy) / 2.0) * window
    else:              # dark spot
        pat = -amp * np.exp(-3.0 * rho2)
    return pat * window


def _background(size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (4, 4))
    axis = np.linspace(0, 3, size)
    i0 = np.floor(axis).astype(int).clip(0, 2)
    frac = axis - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return 0.45 + 0.08 * cols + rng.normal(0.0, noise, (size, size))


def generate_synthetic(spec: SyntheticSpec, n: int) -> list:
    """Generate n labeled samples, deterministic in the spec seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    samples = []
    for idx in range(n):
        img = _background(s, spec.noise, rng)
        count = rng.choice(len(spec.box_count_probs), p=spec.box_count_probs)
        classes = rng.choice(spec.num_classes, size=count, replace=False)
        labels = np.zeros(spec.num_classes, dtype=np.int8)
        boxes = []
        occupied = []
        for cls in classes:
            side = int(round(rng.uniform(*spec.blob_size_range) * s))
            side = min(side, s)
            # keep blob centers apart when possible (16 placement attempts)
            for _ in range(16):
                x0 = int(rng.integers(0, s - side + 1))
                y0 = int(rng.integers(0, s - side + 1))
                cx, cy = x0 + side / 2, y0 + side / 2
                if all((cx - ox) ** 2 + (cy - oy) ** 2 > (side * 0.7) ** 2
                       for ox, oy in occupied):
                    break
            occupied.append((cx, cy))
            img[y0:y0 + side, x0:x0 + side] += _pattern(int(cls), side, rng)
            labels[cls] = 1
            boxes.append(GroundTruthBox(
                cls=int(cls), cx=cx / s, cy=cy / s, w=side / s, h=side / s,
            ))
        image_id = f"img_{idx:06d}"
        samples.append(Sample(
            image_id=image_id,
            patient_id=f"pat_{idx:06d}",
            image=np.clip(img, 0.0, 1.0),
            labels=labels,
            boxes=boxes,
        ))
    return samples


def class_names(num_classes: int) -> list:
    return [f"blob{i}" for i in range(num_classes)]


def write_dataset(samples: list, out_dir, classes: list,
                  splits: dict = None) -> None:
    """Write samples in the standard layout: images/, labels.csv, boxes.csv,
    classes.txt, and splits.csv when a split assignment is given."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    label_rows = []
    box_rows = []
    for s in samples:
        write_pgm(out / "images" / f"{s.image_id}.pgm", s.image)
        names = [classes[i] for i in range(len(classes)) if s.labels[i]]
        label_rows.append((s.image_id, s.patient_id, names))
        for b in s.boxes:
            box_rows.append((s.image_id, classes[b.cls],
                             b.cx - b.w / 2, b.cy - b.h / 2, b.w, b.h))
    write_labels_csv(out / "labels.csv", label_rows)
    write_boxes_csv(out / "boxes.csv", box_rows)
    (out / "classes.txt").write_text("".join(f"{c}\n" for c in classes))
    if splits is not None:
        write_splits_csv(out / "splits.csv", splits)


def make_splits(samples: list, n_train: int, n_val: int, n_test: int,
                seed: int = 0) -> dict:
    """Deterministic image-level split of a synthetic sample list."""
    if n_train + n_val + n_test > len(samples):
        raise ValueError("split sizes exceed the number of samples")
    rng = np.random.default_rng(seed)
    ids = [s.image_id for s in samples]
    rng.shuffle(ids)
    splits = {}
    for i, image_id in enumerate(ids):
        if i < n_train:
            splits[image_id] = "train"
        elif i < n_train + n_val:
            splits[image_id] = "val"
        elif i < n_train + n_val + n_test:
            splits[image_id] = "test"
    return splits
