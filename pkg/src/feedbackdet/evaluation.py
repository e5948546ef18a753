"""Class-wise NMS, greedy matching and COCO-style AP / AP50 / AP75.

AP at one IoU threshold is the all-point interpolated area under the precision
envelope,

    AP_a = sum_k max_{k' >= k} P_a(k') * (r_a(k) - r_a(k - 1)),

over detections ranked by score. The headline AP averages AP_a over the
thresholds 0.50, 0.55, ..., 0.95 and over classes that have ground truth.
A 101-recall-point mode (the COCO tool's interpolation) is available for
cross-checking.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .config import CLASS_NAMES

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * r, 2) for r in range(10))


class Detections(NamedTuple):
    boxes: np.ndarray  # [n, 4] xyxy
    scores: np.ndarray  # [n]
    labels: np.ndarray  # [n] 0-based class


class GroundTruth(NamedTuple):
    boxes: np.ndarray  # [g, 4]
    labels: np.ndarray  # [g]


def iou(a, b) -> float:
    """IoU of two xyxy boxes; 0 for disjoint or degenerate boxes."""
    for box in (a, b):
        if box[2] <= box[0] or box[3] <= box[1]:
            logger.warning("degenerate box %s", list(box))
    return float(box_iou(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix [len(a), len(b)]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def _ranked(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_thr: float = 0.6,
        max_keep: Optional[int] = None) -> np.ndarray:
    """Class-wise greedy NMS. Returns kept indices ordered by descending score.

    A box is suppressed when its IoU with an already kept box of the same class exceeds ``iou_thr``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels)
    order = _ranked(scores)
    keep: List[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = box_iou(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[pos + 1:]
        hit = (labels[rest] == labels[i]) & (ious[i, rest] > iou_thr)
        suppressed[pos + 1:] |= hit
    return np.asarray(keep, dtype=np.int64)


def postprocess(boxes, scores, labels, score_thresh: float = 0.05, iou_thr: float = 0.6,
                max_detections: int = 100) -> Detections:
    """Score floor, class-wise NMS, then keep the ``max_detections`` best."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = scores >= score_thresh
    boxes, scores, labels = boxes[mask], scores[mask], labels[mask]
    keep = nms(boxes, scores, labels, iou_thr, max_keep=max_detections)
    return Detections(boxes[keep], scores[keep], labels[keep])


@dataclass
class ClassMatches:
    """Ranked TP/FP flags for one class at one IoU threshold."""

    tp: np.ndarray
    scores: np.ndarray
    n_gt: int
    # (image index, detection index, matched gt index or -1, iou)
    records: list = field(default_factory=list)


def match_class(preds: Sequence[Detections], gts: Sequence[GroundTruth], cls: int, iou_thr: float) -> ClassMatches:
    """Greedy matching over all images: detections in global score order each take the
    unmatched same-class gt of highest IoU, provided IoU >= ``iou_thr``."""
    items = []
    for img, det in enumerate(preds):
        for d in np.flatnonzero(np.asarray(det.labels) == cls):
            items.append((float(det.scores[d]), img, int(d)))
    order = _ranked(np.array([s for s, _, _ in items])) if items else []
    gt_idx = [np.flatnonzero(np.asarray(g.labels) == cls) for g in gts]
    used = [np.zeros(len(ix), dtype=bool) for ix in gt_idx]
    n_gt = int(sum(len(ix) for ix in gt_idx))
    tp = np.zeros(len(items), dtype=bool)
    scores = np.zeros(len(items))
    records = []
    for rank, j in enumerate(order):
        score, img, d = items[j]
        scores[rank] = score
        cand = gt_idx[img]
        best, best_iou = -1, iou_thr
        if len(cand):
            ious = box_iou(np.asarray(preds[img].boxes)[d], np.asarray(gts[img].boxes)[cand])[0]
            for g in range(len(cand)):
                if used[img][g] or ious[g] < best_iou:
                    continue
                best, best_iou = g, ious[g]
        if best >= 0:
            used[img][best] = True
            tp[rank] = True
            records.append((img, d, int(cand[best]), float(best_iou)))
        else:
            records.append((img, d, -1, 0.0))
    return ClassMatches(tp, scores, n_gt, records)


def precision_envelope(precision: np.ndarray) -> np.ndarray:
    """max_{k' >= k} precision[k'] (non-increasing)."""
    return np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]


def ap_from_matches(tp: np.ndarray, n_gt: int, interpolation: str = "all") -> float:
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    env = precision_envelope(precision)
    if interpolation == "all":
        delta = np.diff(np.concatenate([[0.0], recall]))
        return float(np.sum(env * delta))
    if interpolation == "101":
        thresholds = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, thresholds, side="left")
        vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(vals.mean())
    raise ValueError(f"unknown interpolation {interpolation!r}")


def average_precision(preds: Sequence[Detections], gts: Sequence[GroundTruth], iou_thr: float,
                      cls: int = 0, interpolation: str = "all") -> float:
    m = match_class(preds, gts, cls, iou_thr)
    return ap_from_matches(m.tp, m.n_gt, interpolation)


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    per_class: Dict[str, float]
    n_images: int
    n_gts: int
    n_dets: int
    fps: Optional[float] = None

    def metrics(self) -> dict:
        out = {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75}
        for name in CLASS_NAMES:
            # None (JSON null) for a class without ground truth in the evaluated set
            out[f"AP_{name}"] = self.per_class.get(name)
        if self.fps is not None:
            out["fps"] = self.fps
        return out

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.metrics() | {"counts": {"images": self.n_images, "gts": self.n_gts, "dets": self.n_dets}},
                      f, indent=2)


def coco_ap(preds: Sequence[Detections], gts: Sequence[GroundTruth], num_classes: int = len(CLASS_NAMES),
            interpolation: str = "all", class_names: Sequence[str] = CLASS_NAMES) -> EvalResult:
    """AP over 10 IoU thresholds, AP50, AP75 and per-class AP.

    Classes without any ground truth are left out of the class mean.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} images")
    n_gts = int(sum(len(g.labels) for g in gts))
    if n_gts == 0:
        raise ValueError("no ground-truth boxes in the evaluated set")
    table = {}  # class -> list of AP per threshold
    for c in range(num_classes):
        if not any(np.any(np.asarray(g.labels) == c) for g in gts):
            logger.info("class %s has no ground truth; excluded from the mean", class_names[c])
            continue
        table[c] = [average_precision(preds, gts, t, c, interpolation) for t in IOU_THRESHOLDS]
    aps = np.array(list(table.values()))  # [classes, thresholds]
    return EvalResult(
        AP=float(aps.mean()),
        AP50=float(aps[:, IOU_THRESHOLDS.index(0.5)].mean()),
        AP75=float(aps[:, IOU_THRESHOLDS.index(0.75)].mean()),
        per_class={class_names[c]: float(np.mean(v)) for c, v in table.items()},
        n_images=len(gts),
        n_gts=n_gts,
        n_dets=int(sum(len(p.labels) for p in preds)),
    )


def write_match_dump(path, preds: Sequence[Detections], gts: Sequence[GroundTruth], image_ids: Sequence[str],
                     iou_thr: float = 0.5, class_names: Sequence[str] = CLASS_NAMES) -> None:
    """Per-detection CSV of the greedy matching at ``iou_thr`` (debugging aid)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "det_index", "class", "score", "matched_gt", "iou"])
        for c, name in enumerate(class_names):
            m = match_class(preds, gts, c, iou_thr)
            for (img, d, g, v), s in zip(m.records, m.scores):
                w.writerow([image_ids[img], d, name, f"{s:.6f}", g, f"{v:.6f}"])

