"""ConvNeXt backbone that runs twice: a plain pass and a feedback-injected pass.

Phase 2 reuses the phase-1 block weights. The only phase-2 parameters are the
three point convolutions that project a feedback map ``R_i`` to the width of
stage ``i`` before it is added to the downsampled previous stage:

    C_i^2 = B_i(PointConv(R_i) + Downsample(LN(C_{i-1}^2)))
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ConfigError, ShapeError

CHECKPOINT_VERSION = "feedbackdet-backbone/1"


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class Block(nn.Module):
    """Depthwise 7x7 -> LN -> 4x MLP -> layer scale, with residual."""

    def __init__(self, dim: int, layer_scale_init: float = 1e-6):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.pwconv2 = nn.Linear(4 * dim, dim)
        self.gamma = nn.Parameter(layer_scale_init * torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        # NHWC strides make the depthwise conv (and its backward) ~3x faster on CPU
        x = x.contiguous(memory_format=torch.channels_last)
        shortcut = x
        x = self.dwconv(x).permute(0, 2, 3, 1)
        x = self.pwconv2(self.act(self.pwconv1(self.norm(x))))
        x = (self.gamma * x).permute(0, 3, 1, 2)
        return shortcut + x


class Downsample(nn.Module):
    """LN then 2x2 stride-2 conv; odd sizes are zero-padded so the output is ceil(n / 2)."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.norm = LayerNorm2d(in_dim)
        self.conv = nn.Conv2d(in_dim, out_dim, 2, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm(x)
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            x = F.pad(x, (0, w % 2, 0, h % 2))
        return self.conv(x)


class FeedbackConvNeXt(nn.Module):
    """ConvNeXt with stage outputs C2..C5 (strides 4..32) and feedback entry points at C3..C5."""

    def __init__(
        self,
        depths: Sequence[int] = (3, 3, 9, 3),
        dims: Sequence[int] = (96, 192, 384, 768),
        feedback_channels: int = 256,
        layer_scale_init: float = 1e-6,
        in_chans: int = 3,
    ):
        super().__init__()
        self.depths = tuple(depths)
        self.dims = tuple(dims)
        self.stem = nn.Sequential(nn.Conv2d(in_chans, dims[0], 4, stride=4), LayerNorm2d(dims[0]))
        self.downsample = nn.ModuleList([Downsample(dims[i - 1], dims[i]) for i in range(1, 4)])
        self.stages = nn.ModuleList(
            [nn.Sequential(*[Block(dims[i], layer_scale_init) for _ in range(depths[i])]) for i in range(4)]
        )
        # phase-2 only; zero init puts training at the zero-feedback fixed point
        self.feedback_convs = nn.ModuleDict(
            {str(level): nn.Conv2d(feedback_channels, dims[level - 2], 1) for level in (3, 4, 5)}
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        for conv in self.feedback_convs.values():
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    @staticmethod
    def _check_image(image: Tensor):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected image [b,3,H,W], got {tuple(image.shape)}")
        if min(image.shape[-2:]) < 64:
            raise ShapeError(f"image {tuple(image.shape[-2:])} is smaller than 64x64")
        if not torch.isfinite(image).all():
            raise ValueError("image contains non-finite values")

    def _stem(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        ph, pw = -h % 4, -w % 4
        if ph or pw:
            image = F.pad(image, (0, pw, 0, ph))
        return self.stem(image)

    def forward_phase1(self, image: Tensor) -> Dict[int, Tensor]:
        """Plain pass. Returns ``{2: C2, 3: C3, 4: C4, 5: C5}``."""
        self._check_image(image)
        x = self.stages[0](self._stem(image))
        feats = {2: x}
        for level in (3, 4, 5):
            x = self.stages[level - 2](self.downsample[level - 3](x))
            feats[level] = x
        return feats

    def inject_feedback(self, level: int, feedback: Optional[Tensor], prev: Tensor) -> Tensor:
        """``PointConv(R_level) + Downsample(LN(C_{level-1}))``; ``feedback=None`` skips the first term."""
        down = self.downsample[level - 3](prev)
        if feedback is None:
            return down
        if feedback.shape[-2:] != down.shape[-2:]:
            raise ShapeError(
                f"feedback R_{level} has spatial size {tuple(feedback.shape[-2:])} but downsampled "
                f"C_{level - 1} has {tuple(down.shape[-2:])}"
            )
        return self.feedback_convs[str(level)](feedback) + down

    def forward_phase2(
        self, feedback: Optional[Mapping[int, Optional[Tensor]]], cached: Mapping[int, Tensor]
    ) -> Dict[int, Tensor]:
        """Feedback pass. C2 is taken from the phase-1 cache (no feedback enters before stage 3).

        ``feedback`` maps level -> R_level. A value of None, or ``feedback=None``, means the level
        receives no feedback term at all (used for the zero-feedback ablation).
        """
        if feedback is not None:
            missing = [lvl for lvl in (3, 4, 5) if lvl not in feedback]
            if missing:
                raise ConfigError(f"feedback maps missing for levels {missing}")
        x = cached[2]
        feats = {2: x}
        for level in (3, 4, 5):
            r = None if feedback is None else feedback[level]
            x = self.stages[level - 2](self.inject_feedback(level, r, x))
            feats[level] = x
        return feats


def save_backbone_weights(backbone: nn.Module, path) -> None:
    """Write the flat dotted-name -> array checkpoint (``.npz``) with shape manifest and version."""
    state = {k: v.detach().cpu().numpy() for k, v in backbone.state_dict().items()}
    manifest = "\n".join(f"{k}:{','.join(map(str, v.shape))}" for k, v in state.items())
    np.savez(path, __version__=np.array(CHECKPOINT_VERSION), __manifest__=np.array(manifest), **state)


def load_backbone_weights(backbone: nn.Module, path, strict: bool = False) -> list:
    """Load a flat checkpoint written by :func:`save_backbone_weights`.

    Keys absent from the file (e.g. the feedback point convs of a plain ConvNeXt
    checkpoint) keep their initialization unless ``strict``. Returns the missing keys.
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    version = str(arrays.pop("__version__", ""))
    if version and version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version!r}")
    manifest = str(arrays.pop("__manifest__", ""))
    for line in filter(None, manifest.splitlines()):
        name, shape = line.rsplit(":", 1)
        expected = tuple(int(s) for s in shape.split(",") if s)
        if name in arrays and tuple(arrays[name].shape) != expected:
            raise ShapeError(f"{path}: {name} stored with shape {arrays[name].shape}, manifest says {expected}")
    own = backbone.state_dict()
    unknown = sorted(set(arrays) - set(own))
    if unknown:
        raise ConfigError(f"{path}: unknown parameters {unknown[:5]}")
    for name, arr in arrays.items():
        if tuple(own[name].shape) != arr.shape:
            raise ShapeError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(own[name].shape)}")
    missing = sorted(set(own) - set(arrays))
    if strict and missing:
        raise ConfigError(f"{path}: missing parameters {missing[:5]}")
    backbone.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()}, strict=False)
    return missing
