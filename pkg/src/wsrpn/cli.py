"""Command-line interface.

Subcommands: gen-data, train, eval, predict, export-heatmaps, grad-check.
Exit codes: 0 success, 1 usage error, 2 runtime failure; errors go to
standard error. Training-related commands accept a JSON config file
(--config) whose keys mirror TrainConfig; unknown keys are rejected and
every field can be overridden by a flag. The effective config is echoed to
the output directory.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import grad_check, no_grad, set_default_dtype, tensor
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    SyntheticSpec,
    class_names,
    compute_norm_stats,
    generate_synthetic,
    load_dataset,
    make_splits,
    read_pgm,
    write_dataset,
    write_pgm,
)
from .losses import LossConfig, total_loss
from .metrics import metrics_report, write_detections_csv
from .model import ModelConfig, WSRPN
from .trainer import (
    TrainConfig,
    TrainingError,
    evaluate_map,
    load_model,
    predict_detections,
    train,
)


class UsageError(Exception):
    """Bad flags, bad config file, or inconsistent options (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        elif f.name == "channels":
            p.add_argument(flag, type=str, default=None,
                           help="comma-separated, e.g. 16,32,64,64")
        else:
            p.add_argument(flag, type=str, default=None)
    p.add_argument("--paper-scale", action="store_true",
                   help="start from the paper-scale profile instead of desk scale")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _build_config(args) -> TrainConfig:
    """defaults < config file < command-line flags."""
    base = TrainConfig.paper_scale() if args.paper_scale else TrainConfig()
    data = base.to_dict()
    if args.config:
        try:
            with open(args.config) as fh:
                file_data = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config}: invalid JSON ({e})")
        known = set(data)
        unknown = sorted(set(file_data) - known)
        if unknown:
            raise UsageError(
                f"unknown config keys: {unknown}; valid keys: {sorted(known)}"
            )
        data.update(file_data)
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "channels":
            data[f.name] = [int(v) for v in str(value).split(",") if v]
        elif isinstance(f.default, bool):
            data[f.name] = value
        elif isinstance(f.default, int):
            data[f.name] = int(value)
        elif isinstance(f.default, float):
            data[f.name] = float(value)
        else:
            data[f.name] = value
    try:
        config = TrainConfig.from_dict(data)
        config.validate()
    except ValueError as e:
        raise UsageError(str(e))
    return config


def _echo_config(config: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(args, need_boxes: bool = True):
    root = Path(args.data)
    label_csv = root / "labels.csv"
    bbox_csv = root / "boxes.csv"
    split_csv = root / "splits.csv"
    if not label_csv.exists():
        raise FileNotFoundError(f"labels file missing: {label_csv}")
    return load_dataset(
        root / "images",
        label_csv,
        bbox_csv=bbox_csv if bbox_csv.exists() and need_boxes else None,
        split_csv=split_csv if split_csv.exists() else None,
        seed=getattr(args, "split_seed", 0),
    )


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        image_size=args.image_size,
        seed=args.seed,
        noise=args.noise,
    )
    n_train, n_val, n_test = args.n_train, args.n_val, args.n_test
    if args.n is not None:
        n_train = args.n - 2 * max(1, round(args.n * 0.1))
        n_val = n_test = max(1, round(args.n * 0.1))
    if not all(v is not None for v in (n_train, n_val, n_test)):
        raise UsageError("pass either --n or all of --n-train/--n-val/--n-test")
    total = n_train + n_val + n_test
    samples = generate_synthetic(spec, total)
    splits = make_splits(samples, n_train, n_val, n_test, seed=args.seed)
    write_dataset(samples, args.out, class_names(args.classes), splits)
    print(f"wrote {total} samples ({n_train}/{n_val}/{n_test} train/val/test) "
          f"to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _build_config(args)
    dataset = _load_data(args)
    config.num_classes = len(dataset.classes)
    _echo_config(config, args.out)
    result = train(config, dataset, args.out)
    print(json.dumps({
        "best_val_mAP": result.best_val_map,
        "best_iteration": result.best_iteration,
        "iterations_run": result.iterations_run,
        "checkpoint": result.checkpoint_path,
        "log": result.log_path,
    }, indent=2))
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = load_model(ckpt)
    dataset = _load_data(args)
    samples = dataset.split(args.split)
    if not samples:
        raise TrainingError(f"split '{args.split}' is empty")
    images = np.stack([s.image for s in samples])
    dets = predict_detections(model, images, ckpt.norm_stats)
    gts = [s.boxes for s in samples]
    report = metrics_report(dets, gts, len(dataset.classes), dataset.classes)
    report["split"] = args.split
    report["checkpoint"] = str(args.checkpoint)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rows = []
        for s, ds in zip(samples, dets):
            rows.extend((s.image_id, d) for d in ds)
        write_detections_csv(Path(args.out) / "detections.csv", rows)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = load_model(ckpt)
    paths = sorted(Path(args.images).glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no .pgm images found in {args.images}")
    images = np.stack([read_pgm(p) for p in paths])
    dets = predict_detections(model, images, ckpt.norm_stats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for p, ds in zip(paths, dets):
        rows.extend((p.stem, d) for d in ds)
    write_detections_csv(out, rows)
    print(f"wrote {sum(len(d) for d in dets)} detections for {len(paths)} "
          f"images to {out}")
    return 0


def _cmd_export_heatmaps(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = load_model(ckpt)
    paths = sorted(Path(args.images).glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no .pgm images found in {args.images}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mean, std = ckpt.norm_stats
    dtype = model.tokens.data.dtype
    index_path = out / "index.csv"
    with open(index_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "kind", "index", "file", "scale"])
        with no_grad():
            for p in paths:
                image = read_pgm(p)
                x = ((image - mean) / max(std, 1e-8)).astype(dtype)
                result = model(tensor(x[None, None]))
                fields = result.fields.data[0]        # (K, H, W)
                patch = result.patch_probs.data[0]    # (H, W, C+1)
                for k in range(fields.shape[0]):
                    name = f"{p.stem}_roi{k}.pgm"
                    scale = float(fields[k].max())
                    write_pgm(out / name, fields[k] / scale if scale > 0 else fields[k])
                    writer.writerow([p.stem, "roi_field", k, name, f"{scale:.9g}"])
                for c in range(patch.shape[-1]):
                    name = f"{p.stem}_patch{c}.pgm"
                    scale = float(patch[..., c].max())
                    write_pgm(out / name,
                              patch[..., c] / scale if scale > 0 else patch[..., c])
                    writer.writerow([p.stem, "patch_map", c, name, f"{scale:.9g}"])
    print(f"wrote heatmaps for {len(paths)} images to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    """Full-loss finite-difference check on the tiny verification config."""
    if args.precision != 64:
        raise UsageError("grad-check requires --precision 64")
    set_default_dtype(np.float64)
    cfg = ModelConfig(num_classes=2, d=8, image_size=64, channels=(4, 6, 8, 8),
                      final_pool=False, heads=2, num_tokens=3, seed=args.seed)
    model = WSRPN(cfg)
    rng = np.random.default_rng(args.seed)
    x = tensor(rng.standard_normal((2, 1, 64, 64)))
    labels = np.array([[1, 0], [0, 1]])
    loss_cfg = LossConfig()

    def f():
        out = model(x)
        loss, _ = total_loss(model, out, labels, loss_cfg)
        return loss

    worst = 0.0
    worst_name = ""
    for name, param in model.named_parameters().items():
        err = grad_check(f, param, eps=1e-5)
        if err > worst:
            worst, worst_name = err, name
    print(f"max relative error: {worst:.3e} (parameter group {worst_name})")
    if worst > args.tolerance:
        print(f"exceeds tolerance {args.tolerance}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="wsrpn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic blob dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--n", type=int, default=None, help="total images (80/10/10 split)")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-val", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--image-size", type=int, default=112)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for detections.csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="detections for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="detections CSV path")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("export-heatmaps",
                       help="receptive fields and patch maps as PGM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_heatmaps)

    p = sub.add_parser("grad-check", help="full-loss finite-difference check")
    p.add_argument("--precision", type=int, default=64)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=46,
                   help="probe seed; the default keeps every parameter "
                        "gradient well above finite-difference noise")
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, CheckpointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
