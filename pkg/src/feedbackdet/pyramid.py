"""Two-phase feature pyramid with feedback and gated fusion.

Phase j builds P5 = L5(C5), P4 = L4(C4) + up(P5), P3 = L3(C3) + up(P4),
P6 = down(P5), P7 = down(P6) with the same laterals in both phases. Phase 2
runs the backbone again with feedback maps R3..R5 selected from phase-1
P3..P5. Each level is then fused as F = (1 - w) P^1 + w P^2 with a
single-channel gate w = sigmoid(conv1x1(P^2)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import FeedbackConvNeXt
from .config import FEEDBACK_LEVELS, LEVELS, STRIDES, ModelConfig, ShapeError
from .selection import FeedbackSelection


def upsample_to(x: Tensor, like: Tensor) -> Tensor:
    """Nearest-neighbour resize of ``x`` to the spatial size of ``like``."""
    return F.interpolate(x, size=like.shape[-2:], mode="nearest")


def subsample2(x: Tensor) -> Tensor:
    """Parameter-free stride-2 subsampling; output size is ceil(n / 2)."""
    return x[..., ::2, ::2]


def convex_fuse(p1: Tensor, p2: Tensor, w: Tensor) -> Tensor:
    """``(1 - w) * p1 + w * p2`` written as ``p1 + w * (p2 - p1)``.

    The difference form returns ``p1`` bitwise when ``p1 == p2``; the final clamp
    absorbs rounding so ``min(p1, p2) <= F <= max(p1, p2)`` holds exactly.
    """
    if p1.shape != p2.shape:
        raise ShapeError(f"cannot fuse P1 {tuple(p1.shape)} with P2 {tuple(p2.shape)}")
    out = p1 + w * (p2 - p1)
    return torch.maximum(torch.minimum(out, torch.maximum(p1, p2)), torch.minimum(p1, p2))


@dataclass
class TwoPhaseOutput:
    fused: Dict[int, Tensor]
    phase1: Dict[int, Tensor]
    phase2: Dict[int, Tensor]
    feedback: Dict[int, Tensor]


class FeedbackPyramid(nn.Module):
    strides = dict(zip(LEVELS, STRIDES))

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.fpn_channels
        self.backbone = FeedbackConvNeXt(cfg.depths, cfg.dims, c, cfg.layer_scale_init)
        self.laterals = nn.ModuleDict({str(lvl): nn.Conv2d(cfg.dims[lvl - 2], c, 1) for lvl in (3, 4, 5)})
        self.selections = nn.ModuleDict(
            {
                str(lvl): FeedbackSelection(c, cfg.dilations, cfg.enable_sigma1, cfg.enable_sigma2)
                for lvl in FEEDBACK_LEVELS
            }
        )
        self.fusions = nn.ModuleDict({str(lvl): nn.Conv2d(c, 1, 1) for lvl in LEVELS})
        self.force_zero_feedback = cfg.force_zero_feedback
        for conv in self.laterals.values():
            nn.init.kaiming_uniform_(conv.weight, a=1)
            nn.init.zeros_(conv.bias)
        for conv in self.fusions.values():
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)

    def build_phase(self, feats: Dict[int, Tensor]) -> Dict[int, Tensor]:
        """Top-down pyramid P3..P7 from backbone stages C3..C5."""
        p5 = self.laterals["5"](feats[5])
        p4 = self.laterals["4"](feats[4])
        p4 = p4 + upsample_to(p5, p4)
        p3 = self.laterals["3"](feats[3])
        p3 = p3 + upsample_to(p4, p3)
        p6 = subsample2(p5)
        p7 = subsample2(p6)
        return {3: p3, 4: p4, 5: p5, 6: p6, 7: p7}

    def fusion_weight(self, level: int, p2: Tensor) -> Tensor:
        return torch.sigmoid(self.fusions[str(level)](p2))

    def fuse(self, level: int, p1: Tensor, p2: Tensor) -> Tensor:
        if p1.shape != p2.shape:
            raise ShapeError(f"level {level}: P1 {tuple(p1.shape)} and P2 {tuple(p2.shape)} differ")
        return convex_fuse(p1, p2, self.fusion_weight(level, p2))

    def select(self, phase1: Dict[int, Tensor]) -> Dict[int, Tensor]:
        return {lvl: self.selections[str(lvl)](phase1[lvl]) for lvl in FEEDBACK_LEVELS}

    def run_two_phase(self, image: Tensor, force_zero_feedback: Optional[bool] = None) -> TwoPhaseOutput:
        """Full pipeline; returns every intermediate for inspection.

        With zero feedback the selection modules are bypassed, the returned feedback
        maps are zeros and the backbone adds no feedback term, so phase 2 reproduces
        phase 1 whatever the parameter values are.
        """
        if force_zero_feedback is None:
            force_zero_feedback = self.force_zero_feedback
        c1 = self.backbone.forward_phase1(image)
        p1 = self.build_phase(c1)
        if force_zero_feedback:
            feedback = {lvl: torch.zeros_like(p1[lvl]) for lvl in FEEDBACK_LEVELS}
            c2 = self.backbone.forward_phase2(None, c1)
        else:
            feedback = self.select(p1)
            c2 = self.backbone.forward_phase2(feedback, c1)
        p2 = self.build_phase(c2)
        fused = {lvl: self.fuse(lvl, p1[lvl], p2[lvl]) for lvl in LEVELS}
        return TwoPhaseOutput(fused, p1, p2, feedback)

    def forward(self, image: Tensor) -> Dict[int, Tensor]:
        return self.run_two_phase(image).fused
