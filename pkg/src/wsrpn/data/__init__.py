"""Synthetic data generation, dataset I/O, splits, and augmentation."""

from .augment import augment
from .io import (
    Dataset,
    DatasetError,
    Sample,
    TrainSample,
    compute_norm_stats,
    load_dataset,
    read_pgm,
    strip_boxes,
    write_pgm,
)
from .synthetic import (
    SyntheticSpec,
    class_names,
    generate_synthetic,
    make_splits,
    write_dataset,
)

__all__ = [
    "augment",
    "Dataset",
    "DatasetError",
    "Sample",
    "TrainSample",
    "compute_norm_stats",
    "load_dataset",
    "read_pgm",
    "strip_boxes",
    "write_pgm",
    "SyntheticSpec",
    "class_names",
    "generate_synthetic",
    "make_splits",
    "write_dataset",
]
