"""Feedback feature selection: ASPP fusion gated by channel and spatial attention.

    A  = concat(conv1x1(P), conv3x3_r3(P), conv3x3_r6(P), conv1x1(avgpool(P)))
    s1 = sigmoid(conv1x1(avgpool(A) + maxpool(A)))      [b, C, 1, 1]
    s2 = sigmoid(depthwise7x7(A))                       [b, C, h, w]
    R  = A * s1 * s2
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .config import ConfigError, ShapeError


def open_sigmoid(x: Tensor) -> Tensor:
    """Sigmoid kept strictly inside (0, 1); float32 sigmoid saturates to exactly 1.0 above ~17."""
    tiny = torch.finfo(x.dtype).tiny
    upper = float(torch.nextafter(torch.tensor(1.0, dtype=x.dtype), torch.tensor(0.0, dtype=x.dtype)))
    return torch.sigmoid(x).clamp(tiny, upper)


class ASPP(nn.Module):
    def __init__(self, channels: int = 256, dilations: Sequence[int] = (3, 6)):
        super().__init__()
        if channels % 4:
            raise ConfigError(f"ASPP width {channels} is not divisible by 4")
        branch = channels // 4
        self.channels = channels
        self.point = nn.Conv2d(channels, branch, 1)
        self.dilated = nn.ModuleList(
            [nn.Conv2d(channels, branch, 3, padding=r, dilation=r) for r in dilations]
        )
        self.pool_conv = nn.Conv2d(channels, branch, 1)

    def pooled_branch(self, x: Tensor) -> Tensor:
        g = self.pool_conv(x.mean(dim=(2, 3), keepdim=True))
        return g.expand(-1, -1, *x.shape[-2:])

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"ASPP expects {self.channels} channels, got {x.shape[1]}")
        outs = [self.point(x)] + [conv(x) for conv in self.dilated] + [self.pooled_branch(x)]
        return torch.cat(outs, dim=1)


class ChannelAttention(nn.Module):
    """Hybrid (avg + max) global pooling feeding one shared 1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)

    def forward(self, a: Tensor) -> Tensor:
        pooled = a.mean(dim=(2, 3), keepdim=True) + a.amax(dim=(2, 3), keepdim=True)
        return open_sigmoid(self.conv(pooled))


class SpatialAttention(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)

    def forward(self, a: Tensor) -> Tensor:
        return open_sigmoid(self.conv(a))


class FeedbackSelection(nn.Module):
    """Turns a phase-1 pyramid level ``P_i`` into the feedback map ``R_i`` (same shape).

    A disabled attention factor is replaced by 1, so with both disabled the module is plain ASPP.
    """

    def __init__(
        self,
        channels: int = 256,
        dilations: Sequence[int] = (3, 6),
        enable_sigma1: bool = True,
        enable_sigma2: bool = True,
    ):
        super().__init__()
        self.aspp = ASPP(channels, dilations)
        self.channel_attention = ChannelAttention(channels)
        self.spatial_attention = SpatialAttention(channels)
        self.enable_sigma1 = enable_sigma1
        self.enable_sigma2 = enable_sigma2
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=1)
                nn.init.zeros_(m.bias)

    def forward(self, p: Tensor, return_parts: bool = False):
        a = self.aspp(p)
        r = a
        parts = {"A": a}
        if self.enable_sigma1:
            s1 = self.channel_attention(a)
            r = r * s1
            parts["sigma1"] = s1
        if self.enable_sigma2:
            s2 = self.spatial_attention(a)
            r = r * s2
            parts["sigma2"] = s2
        if return_parts:
            return r, parts
        return r
