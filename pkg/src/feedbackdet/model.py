"""Full detector: input normalisation, two-phase feedback pyramid, adaptive head, postprocessing."""

from __future__ import annotations

from typing import List, Optional

import torch
from torch import Tensor, nn

from .config import IMAGENET_MEAN, IMAGENET_STD, ModelConfig
from .evaluation import Detections, postprocess
from .head import AdaptiveHead, HeadOutputs, decode
from .loss import LossComponents, compute_loss
from .pyramid import FeedbackPyramid, TwoPhaseOutput


class FeedbackDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.pyramid = FeedbackPyramid(cfg)
        self.head = AdaptiveHead(cfg)
        mean = cfg.pixel_mean or IMAGENET_MEAN
        std = cfg.pixel_std or IMAGENET_STD
        self.register_buffer("pixel_mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1), False)
        self.register_buffer("pixel_std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1), False)

    @property
    def backbone(self):
        return self.pyramid.backbone

    def set_normalization(self, mean, std):
        self.pixel_mean.copy_(torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.pixel_std.copy_(torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def normalize(self, images: Tensor) -> Tensor:
        """[b, 1|3, H, W] in [0, 1] -> normalised 3-channel input (grayscale is replicated)."""
        if images.shape[1] == 1:
            images = images.expand(-1, 3, -1, -1)
        return (images - self.pixel_mean) / self.pixel_std

    def features(self, images: Tensor) -> TwoPhaseOutput:
        return self.pyramid.run_two_phase(self.normalize(images))

    def forward(self, images: Tensor) -> HeadOutputs:
        return self.head(self.features(images).fused)

    def loss(self, images: Tensor, gt_boxes: List[Tensor], gt_labels: List[Tensor]) -> LossComponents:
        return compute_loss(self(images), gt_boxes, gt_labels, self.cfg.iou_loss)

    @torch.no_grad()
    def predict(self, images: Tensor, image_size: Optional[tuple] = None) -> List[Detections]:
        """Post-NMS detections in model-input pixel coordinates."""
        cfg = self.cfg
        outputs = self(images)
        size = image_size or tuple(images.shape[-2:])
        results = []
        for cand in decode(outputs, size, cfg.score_thresh, cfg.pre_nms_topk):
            results.append(
                postprocess(cand.boxes.cpu().numpy(), cand.scores.cpu().numpy(), cand.labels.cpu().numpy(),
                            cfg.score_thresh, cfg.nms_thresh, cfg.max_detections)
            )
        return results
