"""Grad-CAM on the fused pyramid features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import LEVELS
from .model import FeedbackDetector


@dataclass
class CamMap:
    heatmap: np.ndarray  # [H, W] in [0, 1]
    target_class: int
    level: int


def cam_from_features(features: torch.Tensor, grads: torch.Tensor, size) -> np.ndarray:
    """ReLU(sum_c mean(grad_c) * F_c), bilinearly resized to ``size`` and scaled to max 1.

    Args:
        features, grads: [1, C, h, w].
    """
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * features).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.clamp_(0, 1).detach().cpu().numpy()


def grad_cam(model: FeedbackDetector, image: torch.Tensor, target_class: int, level: int = 3) -> CamMap:
    """Class activation map for ``target_class`` from fused level ``level``.

    The score is the class logit summed over every location; only the chosen level's
    logits depend on that level's features.

    Args:
        image: [1, C, H, W] model input in [0, 1].
    """
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level}")
    if not 0 <= target_class < model.cfg.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    model.eval()
    with torch.enable_grad():
        fused = model.features(image).fused
        feat = fused[level]
        outputs = model.head(fused)
        score = sum(c[:, target_class].sum() for c in outputs.cls_logits)
        (grads,) = torch.autograd.grad(score, feat)
    return CamMap(cam_from_features(feat.detach(), grads, image.shape[-2:]), target_class, level)


def cam_mass(heatmap: np.ndarray, boxes: np.ndarray):
    """(mass inside the union of ``boxes``, mass outside)."""
    inside = np.zeros(heatmap.shape, dtype=bool)
    for x1, y1, x2, y2 in np.asarray(boxes).reshape(-1, 4):
        inside[int(np.floor(y1)):int(np.ceil(y2)), int(np.floor(x1)):int(np.ceil(x2))] = True
    return float(heatmap[inside].sum()), float(heatmap[~inside].sum())


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.45,
            crop: Optional[tuple] = None) -> Image.Image:
    """Blend a jet colour map of ``heatmap`` over a grayscale/RGB image."""
    if crop is not None:
        heatmap = heatmap[:crop[0], :crop[1]]
    base = np.asarray(Image.fromarray(image).convert("RGB"), dtype=np.float64)
    h = np.clip(heatmap, 0, 1)[..., None]
    ramp = np.clip(1.5 - np.abs(4 * h - np.array([3.0, 2.0, 1.0])), 0, 1)
    out = (1 - alpha) * base + alpha * 255.0 * ramp
    return Image.fromarray(np.clip(out, 0, 255).astype(np.uint8))
