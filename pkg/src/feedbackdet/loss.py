"""FCOS target assignment and the detection objective.

    L = (1 / N_pos) * [ sum_all Focal(c, c*) + sum_pos IoULoss(t, t*) + sum_pos BCE(o, o*) ]

The classification sum is normalised by max(N_pos, 1); with no positives the
regression and center-ness terms are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import SIZE_RANGES
from .head import HeadOutputs, all_locations, decode_distances

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class AssignedTargets:
    labels: Tensor  # [N] long, 0 = background, 1..M = class
    reg: Tensor  # [N, 4] (l, t, r, b) in input pixels; meaningful where labels > 0
    centerness: Tensor  # [N], meaningful where labels > 0

    @property
    def positive(self) -> Tensor:
        return self.labels > 0


def assign_targets(
    locations: Sequence[Tensor],
    gt_boxes: Tensor,
    gt_labels: Tensor,
    size_ranges: Sequence[Tuple[float, float]] = SIZE_RANGES,
) -> AssignedTargets:
    """Assign each location (all levels concatenated) to at most one ground-truth box.

    A location is positive iff it lies strictly inside a box and max(l, t, r, b)
    falls in its level's (lo, hi] range. Among several candidates the box with the
    smallest area wins (first in input order on equal area).

    Args:
        locations: per-level [n_l, 2] (x, y) points.
        gt_boxes: [G, 4] xyxy pixels.
        gt_labels: [G] 0-based class index.
    """
    points = torch.cat(list(locations))
    lo = torch.cat([points.new_full((len(l),), r[0]) for l, r in zip(locations, size_ranges)])
    hi = torch.cat([points.new_full((len(l),), r[1]) for l, r in zip(locations, size_ranges)])
    n = points.shape[0]
    if gt_boxes.numel() == 0:
        return AssignedTargets(
            torch.zeros(n, dtype=torch.long, device=points.device), points.new_zeros(n, 4), points.new_zeros(n)
        )
    gt_boxes = gt_boxes.to(points)
    x, y = points[:, 0:1], points[:, 1:2]
    ltrb = torch.stack(
        [x - gt_boxes[:, 0], y - gt_boxes[:, 1], gt_boxes[:, 2] - x, gt_boxes[:, 3] - y], dim=2
    )  # [N, G, 4]
    inside = ltrb.min(dim=2).values > 0
    max_d = ltrb.max(dim=2).values
    in_range = (max_d > lo[:, None]) & (max_d <= hi[:, None])
    area = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    cand_area = area[None].expand(n, -1).clone()
    cand_area[~(inside & in_range)] = math.inf
    best_area, best = cand_area.min(dim=1)
    labels = gt_labels.to(points.device).long()[best] + 1
    labels[best_area == math.inf] = 0
    reg = ltrb[torch.arange(n, device=points.device), best]
    ctn = points.new_zeros(n)
    pos = labels > 0
    ctn[pos] = centerness_target(reg[pos])
    return AssignedTargets(labels, reg, ctn)


def centerness_target(ltrb: Tensor) -> Tensor:
    """sqrt(min(l, r) / max(l, r) * min(t, b) / max(t, b))."""
    l, t, r, b = ltrb.unbind(-1)
    lr = torch.minimum(l, r) / torch.maximum(l, r)
    tb = torch.minimum(t, b) / torch.maximum(t, b)
    return torch.sqrt(lr * tb)


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha: float = FOCAL_ALPHA,
                       gamma: float = FOCAL_GAMMA) -> Tensor:
    """Elementwise focal loss on sigmoid probabilities (no reduction)."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def iou_loss(pred: Tensor, target: Tensor, kind: str = "iou", eps: float = 1e-7) -> Tensor:
    """IoU between boxes given as distances from a shared anchor. ``-ln(IoU)`` or ``1 - GIoU``."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    target_area = (tl + tr) * (tt + tb)
    w_inter = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    h_inter = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = w_inter * h_inter
    union = pred_area + target_area - inter
    iou = inter / union.clamp(min=eps)
    if kind == "iou":
        return -torch.log(iou.clamp(min=eps))
    if kind == "giou":
        hull = (torch.maximum(pl, tl) + torch.maximum(pr, tr)) * (torch.maximum(pt, tt) + torch.maximum(pb, tb))
        return 1 - (iou - (hull - union) / hull.clamp(min=eps))
    raise ValueError(f"unknown IoU loss {kind!r}")


@dataclass
class LossComponents:
    total: Tensor
    cls: Tensor
    reg: Tensor
    ctn: Tensor
    n_pos: int

    def as_floats(self) -> dict:
        return {
            "total": self.total.item(), "cls": self.cls.item(), "reg": self.reg.item(),
            "ctn": self.ctn.item(), "n_pos": self.n_pos,
        }


class NonFiniteLossError(FloatingPointError):
    def __init__(self, components: dict):
        super().__init__(f"non-finite loss: {components}")
        self.components = components


def detection_loss(
    cls_logits: Tensor,
    pred_dist: Tensor,
    ctn_logits: Tensor,
    labels: Tensor,
    reg_targets: Tensor,
    ctn_targets: Tensor,
    iou_kind: str = "iou",
) -> LossComponents:
    """Loss over flattened locations.

    Args:
        cls_logits: [N, M]; pred_dist: [N, 4] decoded positive distances; ctn_logits: [N].
        labels: [N] with 0 = background; reg_targets: [N, 4]; ctn_targets: [N].
    """
    pos = labels > 0
    n_pos = int(pos.sum())
    onehot = torch.zeros_like(cls_logits)
    onehot[pos, labels[pos] - 1] = 1.0
    norm = max(n_pos, 1)
    cls = sigmoid_focal_loss(cls_logits, onehot).sum() / norm
    if n_pos:
        reg = iou_loss(pred_dist[pos], reg_targets[pos], iou_kind).sum() / n_pos
        ctn = F.binary_cross_entropy_with_logits(ctn_logits[pos], ctn_targets[pos], reduction="sum") / n_pos
    else:
        # keep the graph connected so backward() works on images without boxes
        reg = pred_dist.sum() * 0.0
        ctn = ctn_logits.sum() * 0.0
    total = cls + reg + ctn
    return LossComponents(total, cls, reg, ctn, n_pos)


def compute_loss(outputs: HeadOutputs, gt_boxes: List[Tensor], gt_labels: List[Tensor],
                 iou_kind: str = "iou") -> LossComponents:
    """Assign targets for every image of the batch and evaluate the objective over all locations."""
    sizes = [tuple(c.shape[-2:]) for c in outputs.cls_logits]
    device = outputs.cls_logits[0].device
    locs, strides = all_locations(sizes, outputs.strides, device)
    cls, reg_raw, ctn = outputs.flatten()
    targets = [assign_targets(locs, b.to(device), l.to(device)) for b, l in zip(gt_boxes, gt_labels)]
    labels = torch.cat([t.labels for t in targets])
    reg_t = torch.cat([t.reg for t in targets])
    ctn_t = torch.cat([t.centerness for t in targets])
    batch = cls.shape[0]
    dist = decode_distances(reg_raw.reshape(-1, 4), strides.repeat(batch))
    return detection_loss(cls.reshape(-1, cls.shape[-1]), dist, ctn.reshape(-1), labels, reg_t, ctn_t, iou_kind)
