"""Model / training configuration and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


CLASS_NAMES = ("benign", "malignant")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
STRIDES = (8, 16, 32, 64, 128)
LEVELS = (3, 4, 5, 6, 7)
FEEDBACK_LEVELS = (3, 4, 5)
# FCOS object-size ranges, (lo, hi] on max(l, t, r, b)
SIZE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, float("inf")))


@dataclass
class ModelConfig:
    depths: Tuple[int, ...] = (3, 3, 9, 3)
    dims: Tuple[int, ...] = (96, 192, 384, 768)
    fpn_channels: int = 256
    num_classes: int = 2
    layer_scale_init: float = 1e-6
    # feedback selection
    dilations: Tuple[int, ...] = (3, 6)
    enable_sigma1: bool = True
    enable_sigma2: bool = True
    force_zero_feedback: bool = False
    # head
    tower_depth: int = 4
    preprocess: str = "surround"
    surround_tau: float = 3.0
    gn_groups: int = 32
    iou_loss: str = "iou"
    # input
    image_size: Tuple[int, int] = (800, 1024)
    stretch_resize: bool = False
    # empty = resolved at train time (natural-image stats if pretrained, else dataset stats)
    pixel_mean: Tuple[float, ...] = ()
    pixel_std: Tuple[float, ...] = ()
    # inference
    score_thresh: float = 0.05
    nms_thresh: float = 0.6
    pre_nms_topk: int = 1000
    max_detections: int = 100

    def validate(self) -> "ModelConfig":
        if len(self.depths) != 4 or len(self.dims) != 4:
            raise ConfigError("depths and dims must list the four stages C2..C5")
        if self.fpn_channels % 4:
            raise ConfigError(f"fpn_channels={self.fpn_channels} is not divisible by 4")
        if len(self.dilations) != 2:
            raise ConfigError("selection.dilations must hold exactly two rates")
        if self.preprocess not in ("surround", "identity"):
            raise ConfigError(f"head.preprocess must be surround|identity, got {self.preprocess!r}")
        if self.iou_loss not in ("iou", "giou"):
            raise ConfigError(f"loss.iou must be iou|giou, got {self.iou_loss!r}")
        if self.surround_tau <= 0:
            raise ConfigError("surround.tau must be positive")
        if min(self.image_size) < 64:
            raise ConfigError("image_size must be at least 64x64")
        return self


def model_preset(name: str) -> ModelConfig:
    """``full`` is the ConvNeXt-tiny detector; ``tiny`` divides every width by 4 for CPU runs."""
    if name == "full":
        return ModelConfig()
    if name == "tiny":
        return ModelConfig(
            dims=(24, 48, 96, 192),
            fpn_channels=64,
            gn_groups=16,
            image_size=(256, 320),
        )
    raise ConfigError(f"unknown preset {name!r} (expected full|tiny)")


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 4
    total_steps: int = 50000
    decay_steps: Tuple[int, ...] = (25000, 35000)
    decay_factor: float = 0.1
    warmup_steps: int = 0
    seed: int = 0
    preset: str = "full"
    ckpt_every: int = 5000
    out_dir: str = "runs/default"
    # data: either an annotation file or a synthetic set
    annotations: str = ""
    synth_n: int = 0
    synth_seed: int = 0
    split_seed: int = 0
    train_split: str = "train"
    pretrained: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> "TrainConfig":
        steps = tuple(self.decay_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"decay_steps must be strictly increasing, got {steps}")
        if steps and steps[-1] >= self.total_steps:
            raise ConfigError(f"decay_steps {steps} must lie below total_steps={self.total_steps}")
        if self.batch < 1 or self.total_steps < 1:
            raise ConfigError("batch and total_steps must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        self.model.validate()
        return self


# config-file key -> (section, attribute)
_MODEL_KEYS = {
    "preset": None,
    "model.depths": "depths",
    "model.dims": "dims",
    "model.fpn_channels": "fpn_channels",
    "model.layer_scale_init": "layer_scale_init",
    "model.image_size": "image_size",
    "model.stretch_resize": "stretch_resize",
    "model.pixel_mean": "pixel_mean",
    "model.pixel_std": "pixel_std",
    "selection.enable_sigma1": "enable_sigma1",
    "selection.enable_sigma2": "enable_sigma2",
    "selection.dilations": "dilations",
    "pyramid.force_zero_feedback": "force_zero_feedback",
    "head.tower_depth": "tower_depth",
    "head.preprocess": "preprocess",
    "head.gn_groups": "gn_groups",
    "surround.tau": "surround_tau",
    "loss.iou": "iou_loss",
    "test.score_thresh": "score_thresh",
    "test.nms_thresh": "nms_thresh",
    "test.pre_nms_topk": "pre_nms_topk",
    "test.max_detections": "max_detections",
}


def _coerce(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.strip("[]()").replace(",", " ").split() if s]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key=value`` lines (``#`` starts a comment) into a validated TrainConfig."""
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value

    cfg = TrainConfig()
    if "preset" in pairs:
        cfg.preset = pairs["preset"]
    cfg.model = model_preset(cfg.preset)
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name not in ("model", "preset")}
    for key, value in pairs.items():
        if key == "preset":
            continue
        if key in _MODEL_KEYS:
            attr = _MODEL_KEYS[key]
            setattr(cfg.model, attr, _coerce(value, getattr(cfg.model, attr), key))
        elif key in train_fields:
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg.validate()


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config`."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    lines = [f"preset={cfg.preset}"]
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("model", "preset"):
            continue
        lines.append(f"{f.name}={fmt(getattr(cfg, f.name))}")
    for key, attr in _MODEL_KEYS.items():
        if attr is not None:
            lines.append(f"{key}={fmt(getattr(cfg.model, attr))}")
    return "\n".join(lines) + "\n"
