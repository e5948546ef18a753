"""Adaptive detection head: per-level preprocessing blocks feeding one shared FCOS head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .config import LEVELS, STRIDES, ModelConfig
from .surround_conv import SurroundDeformConv2d

# exp() argument cap; keeps decoded distances finite in float32
MAX_LOG_DISTANCE = 20.0


class PreprocessBlock(nn.Module):
    """Residual block ``G = F + pw(act(norm(dw7x7(act(norm(surround3x3(F)))))))``.

    The trailing pointwise conv is zero-initialised, so a fresh block is an exact identity.
    """

    def __init__(self, channels: int, tau: float = 3.0, gn_groups: int = 32):
        super().__init__()
        self.surround = SurroundDeformConv2d(channels, channels, tau)
        self.norm1 = nn.GroupNorm(gn_groups, channels)
        self.dw = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm2 = nn.GroupNorm(gn_groups, channels)
        self.pw = nn.Conv2d(channels, channels, 1)
        self.act = nn.ReLU(inplace=True)
        nn.init.normal_(self.dw.weight, std=0.01)
        nn.init.zeros_(self.dw.bias)
        nn.init.zeros_(self.pw.weight)
        nn.init.zeros_(self.pw.bias)

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.norm1(self.surround(x)))
        y = self.act(self.norm2(self.dw(y.contiguous(memory_format=torch.channels_last))))
        return x + self.pw(y)


class Scale(nn.Module):
    def __init__(self, init_value: float = 1.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(init_value)))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale


class SharedHead(nn.Module):
    """FCOS decoupled head: classification tower, regression tower, center-ness on the regression tower."""

    def __init__(self, channels: int, num_classes: int = 2, depth: int = 4, gn_groups: int = 32,
                 prior_prob: float = 0.01):
        super().__init__()

        def tower():
            layers = []
            for _ in range(depth):
                layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.GroupNorm(gn_groups, channels), nn.ReLU(inplace=True)]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.reg_tower = tower()
        self.cls_logits = nn.Conv2d(channels, num_classes, 3, padding=1)
        self.bbox_pred = nn.Conv2d(channels, 4, 3, padding=1)
        self.centerness = nn.Conv2d(channels, 1, 3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        c = self.cls_tower(x)
        r = self.reg_tower(x)
        return self.cls_logits(c), self.bbox_pred(r), self.centerness(r)


@dataclass
class HeadOutputs:
    """Per-level raw predictions, lists ordered P3..P7."""

    cls_logits: List[Tensor]  # [b, M, h, w]
    reg_raw: List[Tensor]  # [b, 4, h, w], already multiplied by the level scale
    ctn_logits: List[Tensor]  # [b, 1, h, w]
    strides: Sequence[int] = STRIDES

    def flatten(self):
        """Concatenate levels to [b, N, M], [b, N, 4], [b, N] in row-major location order."""

        def cat(xs):
            return torch.cat([x.flatten(2).transpose(1, 2) for x in xs], dim=1)

        return cat(self.cls_logits), cat(self.reg_raw), cat(self.ctn_logits).squeeze(-1)


class AdaptiveHead(nn.Module):
    """``H(w_i(F_i))``: unshared per-level blocks ``w_i`` and one weight-shared head ``H``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.fpn_channels
        if cfg.preprocess == "surround":
            self.preprocess = nn.ModuleDict(
                {str(lvl): PreprocessBlock(c, cfg.surround_tau, cfg.gn_groups) for lvl in LEVELS}
            )
        else:
            self.preprocess = nn.ModuleDict({str(lvl): nn.Identity() for lvl in LEVELS})
        self.head = SharedHead(c, cfg.num_classes, cfg.tower_depth, cfg.gn_groups)
        self.scales = nn.ModuleList([Scale(1.0) for _ in LEVELS])

    def preprocess_level(self, x: Tensor, level: int) -> Tensor:
        return self.preprocess[str(level)](x)

    def forward(self, fused: Dict[int, Tensor]) -> HeadOutputs:
        cls, reg, ctn = [], [], []
        for i, lvl in enumerate(LEVELS):
            c, r, o = self.head(self.preprocess_level(fused[lvl], lvl))
            cls.append(c)
            reg.append(self.scales[i](r))
            ctn.append(o)
        return HeadOutputs(cls, reg, ctn)


def level_locations(h: int, w: int, stride: int, device=None, dtype=torch.float32) -> Tensor:
    """Grid centres ((x + 0.5) * stride, (y + 0.5) * stride) in row-major order, [h*w, 2] as (x, y)."""
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) * stride
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)


def all_locations(sizes: Sequence[Tuple[int, int]], strides: Sequence[int] = STRIDES, device=None):
    """Locations for every level plus a matching per-location stride vector."""
    locs, strd = [], []
    for (h, w), s in zip(sizes, strides):
        loc = level_locations(h, w, s, device)
        locs.append(loc)
        strd.append(torch.full((loc.shape[0],), float(s), device=device))
    return locs, torch.cat(strd)


def decode_distances(reg_raw: Tensor, stride) -> Tensor:
    """(l, t, r, b) = exp(scaled regression) * stride; strictly positive."""
    if not torch.is_tensor(stride):
        stride = torch.tensor(float(stride), dtype=reg_raw.dtype, device=reg_raw.device)
    elif stride.dim() == 1:
        stride = stride.unsqueeze(-1)
    return torch.exp(reg_raw.clamp(max=MAX_LOG_DISTANCE)) * stride


def distances_to_boxes(points: Tensor, dist: Tensor) -> Tensor:
    x, y = points[..., 0], points[..., 1]
    return torch.stack([x - dist[..., 0], y - dist[..., 1], x + dist[..., 2], y + dist[..., 3]], dim=-1)


def clip_boxes(boxes: Tensor, image_size: Tuple[int, int]) -> Tensor:
    h, w = image_size
    return torch.stack(
        [boxes[..., 0].clamp(0, w), boxes[..., 1].clamp(0, h), boxes[..., 2].clamp(0, w), boxes[..., 3].clamp(0, h)],
        dim=-1,
    )


@dataclass
class Candidates:
    """Scored pre-NMS boxes of one image."""

    boxes: Tensor  # [n, 4] xyxy in model-input pixels
    scores: Tensor  # [n]
    labels: Tensor  # [n] 0-based class index
    points: Tensor  # [n, 2] anchor location of each box


def decode(outputs: HeadOutputs, image_size: Optional[Tuple[int, int]] = None, score_thresh: float = 0.05,
           pre_nms_topk: int = 1000) -> List[Candidates]:
    """Turn raw head outputs into scored boxes (before NMS), per image.

    score = sigmoid(cls) * sigmoid(ctn). Boxes are clipped to ``image_size`` when given.
    """
    batch = outputs.cls_logits[0].shape[0]
    per_image = [[] for _ in range(batch)]
    for cls, reg, ctn, stride in zip(outputs.cls_logits, outputs.reg_raw, outputs.ctn_logits, outputs.strides):
        _, m, h, w = cls.shape
        points = level_locations(h, w, stride, cls.device, cls.dtype)
        scores = torch.sigmoid(cls).flatten(2).transpose(1, 2) * torch.sigmoid(ctn).flatten(2).transpose(1, 2)
        dist = decode_distances(reg.flatten(2).transpose(1, 2), stride)
        for b in range(batch):
            s = scores[b].reshape(-1)  # location-major: index = loc * m + cls
            keep = torch.nonzero(s > score_thresh).squeeze(1)
            if keep.numel() > pre_nms_topk:
                top = s[keep].topk(pre_nms_topk).indices
                keep = keep[top]
            loc = keep // m
            pts = points[loc]
            boxes = distances_to_boxes(pts, dist[b][loc])
            if image_size is not None:
                boxes = clip_boxes(boxes, image_size)
            per_image[b].append(Candidates(boxes, s[keep], keep % m, pts))
    out = []
    for parts in per_image:
        out.append(Candidates(*(torch.cat([getattr(p, f) for p in parts]) for f in ("boxes", "scores", "labels", "points"))))
    return out
