"""Dataset file formats and the split protocol.

Layout: an image directory of 8-bit binary PGM files plus two CSVs —
labels (`image_id,patient_id,labels` with `|`-separated class names, empty
for no finding) and boxes (`image_id,class,x,y,w,h`, top-left corner plus
size, relative coordinates). A `classes.txt` (one name per line) pins the
class order; without it the sorted label vocabulary is used. An optional
`splits.csv` (`image_id,split`) overrides the default patient-level split.
"""

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..metrics import GroundTruthBox


class DatasetError(Exception):
    """Malformed dataset files or inconsistent annotations."""


@dataclass
class Sample:
    image_id: str
    patient_id: str
    image: np.ndarray          # (S, S) float in [0,1]
    labels: np.ndarray         # (|C|,) in {0,1}
    boxes: list = field(default_factory=list)  # GroundTruthBox, eval only


@dataclass
class TrainSample:
    """A sample as the training path sees it: no boxes, by construction."""

    image_id: str
    image: np.ndarray
    labels: np.ndarray


def strip_boxes(samples) -> list:
    """Convert samples to the box-free training type."""
    return [TrainSample(s.image_id, s.image, s.labels) for s in samples]


@dataclass
class Dataset:
    samples: list              # all samples
    classes: list              # class names, fixed order
    splits: dict               # image_id -> "train" | "val" | "test"

    def split(self, name: str) -> list:
        return [s for s in self.samples if self.splits.get(s.image_id) == name]


def write_pgm(path, image: np.ndarray) -> None:
    """Write floats in [0,1] as a binary 8-bit PGM."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    pixels = np.round(arr * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into floats in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=i)
    return pixels.reshape(h, w).astype(float) / 255.0


def write_labels_csv(path, rows) -> None:
    """rows: iterable of (image_id, patient_id, list_of_class_names)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "patient_id", "labels"])
        for image_id, patient_id, names in rows:
            writer.writerow([image_id, patient_id, "|".join(names)])


def write_boxes_csv(path, rows) -> None:
    """rows: iterable of (image_id, class_name, x, y, w, h) — top-left
    corner plus size, relative coordinates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class", "x", "y", "w", "h"])
        for image_id, name, x, y, w, h in rows:
            writer.writerow([image_id, name,
                             f"{x:.6f}", f"{y:.6f}", f"{w:.6f}", f"{h:.6f}"])


def write_splits_csv(path, splits: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "split"])
        for image_id in sorted(splits):
            writer.writerow([image_id, splits[image_id]])


def _read_csv_rows(path, expected_header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise DatasetError(
                f"{path}: expected header {expected_header}, got {header}"
            )
        return list(reader)


def load_dataset(image_dir, label_csv, bbox_csv=None, classes=None,
                 split_csv=None, seed: int = 0) -> Dataset:
    """Load samples and assign splits.

    Default split protocol: patients owning at least one boxed image are
    shuffled with the seed and divided 50/50 into val/test; everyone else
    trains. A split CSV (image_id,split) overrides this entirely — needed
    e.g. when every positive sample has a box and the default protocol
    would leave no positive training data.
    """
    image_dir = Path(image_dir)
    label_rows = _read_csv_rows(label_csv, ["image_id", "patient_id", "labels"])

    if classes is None:
        classes_file = image_dir.parent / "classes.txt"
        if classes_file.exists():
            classes = [ln.strip() for ln in classes_file.read_text().splitlines()
                       if ln.strip()]
        else:
            vocab = set()
            for _, _, lab in label_rows:
                vocab.update(n for n in lab.split("|") if n)
            classes = sorted(vocab)
    class_index = {name: i for i, name in enumerate(classes)}

    boxes_by_image = {}
    if bbox_csv is not None:
        for image_id, name, x, y, w, h in _read_csv_rows(
                bbox_csv, ["image_id", "class", "x", "y", "w", "h"]):
            if name not in class_index:
                raise DatasetError(
                    f"unknown class '{name}' in {bbox_csv}; valid classes: {classes}"
                )
            x, y, w, h = float(x), float(y), float(w), float(h)
            boxes_by_image.setdefault(image_id, []).append(
                GroundTruthBox(cls=class_index[name], cx=x + w / 2, cy=y + h / 2,
                               w=w, h=h)
            )

    samples = []
    patient_of = {}
    for image_id, patient_id, lab in label_rows:
        labels = np.zeros(len(classes), dtype=np.int8)
        for name in lab.split("|"):
            if not name:
                continue
            if name not in class_index:
                raise DatasetError(
                    f"unknown class '{name}' in {label_csv}; valid classes: {classes}"
                )
            labels[class_index[name]] = 1
        path = image_dir / f"{image_id}.pgm"
        if not path.exists():
            raise DatasetError(f"image file missing: {path}")
        samples.append(Sample(
            image_id=image_id,
            patient_id=patient_id,
            image=read_pgm(path),
            labels=labels,
            boxes=boxes_by_image.get(image_id, []),
        ))
        patient_of[image_id] = patient_id

    if split_csv is not None:
        splits = {}
        for image_id, split in _read_csv_rows(split_csv, ["image_id", "split"]):
            if split not in ("train", "val", "test"):
                raise DatasetError(f"{split_csv}: unknown split '{split}'")
            splits[image_id] = split
        missing = [s.image_id for s in samples if s.image_id not in splits]
        if missing:
            raise DatasetError(f"{split_csv}: no split for image(s) {missing[:5]}")
        return Dataset(samples=samples, classes=classes, splits=splits)

    boxed_patients = sorted({patient_of[i] for i in boxes_by_image
                             if i in patient_of})
    if not boxed_patients:
        warnings.warn("no bounding boxes found; all samples assigned to train")
    rng = np.random.default_rng(seed)
    order = list(boxed_patients)
    rng.shuffle(order)
    half = len(order) // 2
    val_p, test_p = set(order[:half]), set(order[half:])
    splits = {}
    for s in samples:
        if s.patient_id in val_p:
            splits[s.image_id] = "val"
        elif s.patient_id in test_p:
            splits[s.image_id] = "test"
        else:
            splits[s.image_id] = "train"
    return Dataset(samples=samples, classes=classes, splits=splits)


def compute_norm_stats(samples) -> tuple:
    """Global pixel mean and standard deviation over a list of samples."""
    acc = np.concatenate([s.image.reshape(-1) for s in samples])
    return float(acc.mean()), float(acc.std())
