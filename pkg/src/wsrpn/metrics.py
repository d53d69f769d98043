"""Detections from ROI outputs, postprocessing, and localization metrics.

All functions here are pure numpy over plain dataclasses; nothing touches
the autodiff graph.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class Detection:
    cls: int
    score: float
    cx: float
    cy: float
    w: float
    h: float


@dataclass
class GroundTruthBox:
    cls: int
    cx: float
    cy: float
    w: float
    h: float


def extract_detections(mu: np.ndarray, sigma: np.ndarray, roi_probs: np.ndarray,
                       gamma: float = 2.0) -> list:
    """One detection per token from (K,2) centers, (K,2) sizes, (K,|C|+1)
    probabilities (no-finding last, never predicted).

    Box extent is mu +/- gamma*sigma per axis, clipped to the unit square;
    class is the argmax over real classes and the score its probability.
    """
    mu = np.asarray(mu)
    sigma = np.asarray(sigma)
    roi_probs = np.asarray(roi_probs)
    nc = roi_probs.shape[-1] - 1
    dets = []
    for k in range(mu.shape[0]):
        cx, cy = float(mu[k, 0]), float(mu[k, 1])
        w = 2.0 * gamma * float(sigma[k, 0])
        h = 2.0 * gamma * float(sigma[k, 1])
        x1, x2 = max(0.0, cx - w / 2), min(1.0, cx + w / 2)
        y1, y2 = max(0.0, cy - h / 2), min(1.0, cy + h / 2)
        c = int(np.argmax(roi_probs[k, :nc]))
        dets.append(Detection(
            cls=c,
            score=float(roi_probs[k, c]),
            cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1,
        ))
    return dets


def top1_per_class(detections: list) -> list:
    """Keep only the highest-scoring detection per class; ties go to the
    earlier (lower token index) detection."""
    best = {}
    for det in detections:
        cur = best.get(det.cls)
        if cur is None or det.score > cur.score:
            best[det.cls] = det
    return [d for d in detections if best.get(d.cls) is d]


def iou(a, b) -> float:
    """Intersection over union of two center-format boxes."""
    ax1, ax2 = a.cx - a.w / 2, a.cx + a.w / 2
    ay1, ay2 = a.cy - a.h / 2, a.cy + a.h / 2
    bx1, bx2 = b.cx - b.w / 2, b.cx + b.w / 2
    by1, by2 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def _match_class(dets, gts, thr):
    """Greedy score-ordered matching within one image and one class.
    Returns a TP flag per detection in score order plus the sorted list."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    flags = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i], gt)
            if v >= thr and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets_per_image: list, gts_per_image: list,
                      iou_threshold: float) -> tuple:
    """Per-class AP and mAP with all-point interpolation.

    Detections pool across images per class, sort by descending score, and
    greedily match the highest-IoU unmatched same-class ground truth at or
    above the threshold. mAP averages over classes with at least one ground
    truth box.
    """
    n_gt_total = sum(len(g) for g in gts_per_image)
    if n_gt_total == 0:
        raise ValueError("no ground truth boxes; average precision is undefined")

    classes = sorted({g.cls for gts in gts_per_image for g in gts})
    ap = {}
    for c in classes:
        records = []  # (score, image index, detection)
        for i, dets in enumerate(dets_per_image):
            for det in dets:
                if det.cls == c:
                    records.append((det.score, i, det))
        n_gt = sum(1 for gts in gts_per_image for g in gts if g.cls == c)
        records.sort(key=lambda rec: -rec[0])
        taken = [[False] * len(gts) for gts in gts_per_image]
        tp = np.zeros(len(records))
        for r, (_, i, det) in enumerate(records):
            best_j, best_iou = -1, 0.0
            for j, gt in enumerate(gts_per_image[i]):
                if gt.cls != c or taken[i][j]:
                    continue
                v = iou(det, gt)
                if v >= iou_threshold and v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0:
                taken[i][best_j] = True
                tp[r] = 1.0
        if not records:
            ap[c] = 0.0
            continue
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(1.0 - tp)
        recall = cum_tp / n_gt
        precision = cum_tp / (cum_tp + cum_fp)
        # All-point interpolation: running max of precision from the right,
        # integrated over recall increments.
        for i in range(len(precision) - 2, -1, -1):
            precision[i] = max(precision[i], precision[i + 1])
        area = 0.0
        prev_r = 0.0
        for i in range(len(recall)):
            if recall[i] > prev_r:
                area += (recall[i] - prev_r) * precision[i]
                prev_r = recall[i]
        ap[c] = float(area)
    m_ap = float(np.mean([ap[c] for c in classes]))
    return ap, m_ap


def loc_accuracy(dets_per_image: list, gts_per_image: list, iou_threshold: float,
                 num_classes: int) -> tuple:
    """Localization accuracy plus a confusion matrix.

    Accuracy: matched ground truths (same-class greedy IoU matching) over
    (total ground truths + unmatched detections), so extra boxes cost score.
    Confusion: class-agnostic greedy one-to-one IoU matching; entry [g, p]
    counts matches with ground-truth class g and predicted class p; the last
    row/column collect unmatched detections/ground truths.
    """
    n_gt = 0
    n_matched = 0
    n_unmatched_det = 0
    confusion = np.zeros((num_classes + 1, num_classes + 1), dtype=int)

    for dets, gts in zip(dets_per_image, gts_per_image):
        n_gt += len(gts)
        for c in {d.cls for d in dets} | {g.cls for g in gts}:
            cd = [d for d in dets if d.cls == c]
            cg = [g for g in gts if g.cls == c]
            flags = _match_class(cd, cg, iou_threshold)
            n_matched += sum(flags)
            n_unmatched_det += len(cd) - sum(flags)

        # class-agnostic one-to-one matching for the confusion report
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        taken = [False] * len(gts)
        for i in order:
            best_j, best_iou = -1, 0.0
            for j, gt in enumerate(gts):
                if taken[j]:
                    continue
                v = iou(dets[i], gt)
                if v >= iou_threshold and v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0:
                taken[best_j] = True
                confusion[gts[best_j].cls, dets[i].cls] += 1
            else:
                confusion[num_classes, dets[i].cls] += 1
        for j, gt in enumerate(gts):
            if not taken[j]:
                confusion[gt.cls, num_classes] += 1

    denom = n_gt + n_unmatched_det
    acc = n_matched / denom if denom else 0.0
    return acc, confusion


def write_detections_csv(path, rows) -> None:
    """rows: iterable of (image_id, Detection). Coordinates are written
    relative with 6 decimal places."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class", "score", "cx", "cy", "w", "h"])
        for image_id, det in rows:
            writer.writerow([
                image_id, det.cls, f"{det.score:.6f}",
                f"{det.cx:.6f}", f"{det.cy:.6f}", f"{det.w:.6f}", f"{det.h:.6f}",
            ])


def metrics_report(dets_per_image, gts_per_image, num_classes: int,
                   class_names=None) -> dict:
    """JSON-ready report: per-class AP and mAP plus loc-acc and confusion at
    IoU 0.3 and 0.5."""
    report = {
        "loc_acc_variant": (
            "matched ground truths / (ground truths + unmatched detections), "
            "same-class greedy IoU matching"
        ),
    }
    for thr in (0.3, 0.5):
        ap, m_ap = average_precision(dets_per_image, gts_per_image, thr)
        acc, confusion = loc_accuracy(dets_per_image, gts_per_image, thr, num_classes)
        key = f"iou_{thr}"
        names = class_names or [str(c) for c in range(num_classes)]
        report[key] = {
            "per_class_ap": {names[c]: ap[c] for c in ap},
            "mAP": m_ap,
            "loc_acc": acc,
            "confusion": confusion.tolist(),
        }
    return report
