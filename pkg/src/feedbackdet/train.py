"""SGD training loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import load_backbone_weights
from .config import ConfigError, IMAGENET_MEAN, IMAGENET_STD, TrainConfig, dump_config, parse_config
from .data import Sample, hflip, image_statistics, load_dataset, resize_pad, split, synth_ultrasound
from .loss import NonFiniteLossError
from .model import FeedbackDetector

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "feedbackdet-checkpoint/1"
LOSS_COLUMNS = ("step", "total", "cls", "reg", "ctn", "n_pos")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: lr0, multiplied by ``decay_factor`` at every decay step passed.

    With ``warmup_steps > 0`` the first steps ramp linearly from lr0/3.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    # decimal arithmetic so that e.g. 0.01 * 0.1**2 is exactly the float 0.0001
    k = bisect.bisect_right(list(cfg.decay_steps), step)
    lr = float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay_factor)) ** k)
    if step < cfg.warmup_steps:
        alpha = step / cfg.warmup_steps
        lr *= 1.0 / 3.0 + (2.0 / 3.0) * alpha
    return lr


# ---------------------------------------------------------------------------
# data

def load_samples(cfg: TrainConfig) -> List[Sample]:
    if cfg.annotations:
        return load_dataset(cfg.annotations)
    if cfg.synth_n > 0:
        return synth_ultrasound(cfg.synth_seed, cfg.synth_n, tuple(cfg.model.image_size))
    raise ConfigError("set either annotations=FILE or synth_n=N")


def select_split(samples: Sequence[Sample], name: str, seed: int) -> List[Sample]:
    """``all`` uses every sample; ``train|val|test`` take the seeded 60/20/20 split."""
    if name == "all":
        return list(samples)
    parts = dict(zip(("train", "val", "test"), split(samples, seed)))
    if name not in parts:
        raise ConfigError(f"unknown split {name!r}")
    return parts[name]


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 [H, W] or [H, W, 3] -> float [C, H, W] in [0, 1]."""
    x = torch.from_numpy(np.array(image, dtype=np.float32)).div_(255.0)
    return x[None] if x.dim() == 2 else x.permute(2, 0, 1)


class BatchSampler:
    """Deterministic in the step index alone, so a resumed run sees the same batches.

    Each epoch is a permutation seeded by (seed, epoch); flips are seeded by (seed, step).
    """

    def __init__(self, samples: Sequence[Sample], batch: int, seed: int, flip_p: float = 0.5):
        self.samples = samples
        self.batch = batch
        self.seed = seed
        self.flip_p = flip_p

    def indices(self, step: int) -> List[int]:
        n = len(self.samples)
        out = []
        for k in range(step * self.batch, (step + 1) * self.batch):
            epoch, pos = divmod(k, n)
            perm = np.random.default_rng([self.seed, epoch]).permutation(n)
            out.append(int(perm[pos]))
        return out

    def __call__(self, step: int):
        rng = np.random.default_rng([self.seed, 1 << 20, step])
        images, boxes, labels = [], [], []
        for i in self.indices(step):
            s = self.samples[i]
            if rng.random() < self.flip_p:
                s = hflip(s)
            images.append(to_tensor(s.image))
            boxes.append(torch.from_numpy(s.boxes).float())
            labels.append(torch.from_numpy(s.labels).long())
        return torch.stack(images), boxes, labels


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: FeedbackDetector, cfg: TrainConfig, step: int,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    """Flat ``name -> tensor`` state with a shape manifest, the config text and optimizer state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    blob = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": dump_config(cfg),
        "manifest": {k: list(v.shape) for k, v in state.items()},
        "state": state,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
    for name, shape in blob["manifest"].items():
        if list(blob["state"][name].shape) != shape:
            raise ValueError(f"{path}: {name} has shape {list(blob['state'][name].shape)}, manifest says {shape}")
    return blob


def load_model(path) -> Tuple[FeedbackDetector, TrainConfig]:
    """Rebuild the detector recorded in a checkpoint (eval mode)."""
    blob = read_checkpoint(path)
    cfg = parse_config(blob["config"])
    model = FeedbackDetector(cfg.model)
    model.load_state_dict(blob["state"])
    return model.eval(), cfg


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    model: FeedbackDetector
    history: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def resolve_normalization(cfg: TrainConfig, samples: Sequence[Sample]):
    """Explicit config values, else natural-image stats for pretrained weights, else dataset stats."""
    if cfg.model.pixel_mean and cfg.model.pixel_std:
        return tuple(cfg.model.pixel_mean), tuple(cfg.model.pixel_std)
    if cfg.pretrained:
        return IMAGENET_MEAN, IMAGENET_STD
    mean, std = image_statistics(samples)
    return (mean,) * 3, (std,) * 3


def prepare(samples: Sequence[Sample], cfg: TrainConfig) -> List[Sample]:
    return [resize_pad(s, tuple(cfg.model.image_size), cfg.model.stretch_resize)[0] for s in samples]


def train(cfg: TrainConfig, samples: Optional[Sequence[Sample]] = None, resume: Optional[str] = None,
          out_dir: Optional[str] = None, log_every: int = 50,
          callback: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Run SGD per ``cfg`` on ``samples`` (already the training split; loaded from cfg when None).

    Writes ``loss.csv``, periodic ``ckpt_XXXXXXX.pt`` files and ``last.pt`` into ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = select_split(load_samples(cfg), cfg.train_split, cfg.split_seed)
    if not samples:
        raise ConfigError("empty training set")
    data = prepare(samples, cfg)

    torch.manual_seed(cfg.seed)
    start = 0
    if resume:
        blob = read_checkpoint(resume)
        saved = parse_config(blob["config"]).model
        cfg.model.pixel_mean, cfg.model.pixel_std = saved.pixel_mean, saved.pixel_std
    else:
        cfg.model.pixel_mean, cfg.model.pixel_std = resolve_normalization(cfg, data)
    model = FeedbackDetector(cfg.model)
    if cfg.pretrained and not resume:
        load_backbone_weights(model.backbone, cfg.pretrained)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    if resume:
        model.load_state_dict(blob["state"])
        if blob["optimizer"] is not None:
            optimizer.load_state_dict(blob["optimizer"])
        start = int(blob["step"])
        logger.info("resumed from %s at step %d", resume, start)
    (out / "config.txt").write_text(dump_config(cfg))

    sampler = BatchSampler(data, cfg.batch, cfg.seed)
    result = TrainResult(model)
    csv_path = out / "loss.csv"
    fresh = start == 0 or not csv_path.exists()
    t0 = time.perf_counter()
    last_good = None
    model.train()
    with open(csv_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOSS_COLUMNS)
        for step in range(start, cfg.total_steps):
            lr = lr_at(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            images, boxes, labels = sampler(step)
            parts = model.loss(images, boxes, labels)
            row = {"step": step, **parts.as_floats()}
            if not all(math.isfinite(row[k]) for k in ("total", "cls", "reg", "ctn")):
                dump = {**row, "lr": lr, "last_good_checkpoint": str(last_good) if last_good else None,
                        "images": sampler.indices(step)}
                (out / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
                fh.flush()
                raise NonFiniteLossError(dump)
            optimizer.zero_grad(set_to_none=True)
            parts.total.backward()
            optimizer.step()
            writer.writerow([step] + [row[k] for k in LOSS_COLUMNS[1:]])
            result.history.append(row)
            if callback is not None:
                callback(step, row)
            if log_every and step % log_every == 0:
                fh.flush()
                logger.info("step %d lr %.2e total %.4f cls %.4f reg %.4f ctn %.4f n_pos %d", step, lr,
                            row["total"], row["cls"], row["reg"], row["ctn"], row["n_pos"])
            done = step + 1
            if cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < cfg.total_steps:
                last_good = save_checkpoint(out / f"ckpt_{done:07d}.pt", model, cfg, done, optimizer)
    result.checkpoint = save_checkpoint(out / "last.pt", model, cfg, cfg.total_steps, optimizer)
    result.seconds = time.perf_counter() - t0
    model.eval()
    return result
