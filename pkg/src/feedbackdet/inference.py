"""Checkpoint evaluation and single-image inference in original image coordinates."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import CLASS_NAMES
from .data import Sample, resize_pad
from .evaluation import Detections, EvalResult, GroundTruth, coco_ap, write_match_dump
from .model import FeedbackDetector
from .train import load_model, load_samples, select_split, to_tensor

CLASS_COLORS = {0: (64, 200, 64), 1: (230, 60, 60)}


@torch.no_grad()
def detect(model: FeedbackDetector, sample: Sample) -> Detections:
    """Resize/pad like training, run the detector, and map boxes back to the sample's own pixels."""
    cfg = model.cfg
    resized, tf = resize_pad(sample, tuple(cfg.image_size), cfg.stretch_resize)
    h, w = sample.size
    content = (min(cfg.image_size[0], round(h * tf.scale_y)), min(cfg.image_size[1], round(w * tf.scale_x)))
    det = model.predict(to_tensor(resized.image)[None], image_size=content)[0]
    return Detections(tf.to_original(det.boxes), det.scores, det.labels)


def evaluate_samples(model: FeedbackDetector, samples: Sequence[Sample]) -> Tuple[EvalResult, List[Detections]]:
    model.eval()
    preds = [detect(model, s) for s in samples]
    gts = [GroundTruth(s.boxes, s.labels) for s in samples]
    return coco_ap(preds, gts), preds


def evaluate(ckpt, split: str = "val", out_dir=None, samples: Optional[Sequence[Sample]] = None) -> EvalResult:
    """Evaluate a checkpoint on a split of its configured dataset.

    Writes ``metrics_<split>.json`` and ``matches_<split>.csv`` when ``out_dir`` is given.
    """
    model, cfg = load_model(ckpt)
    if samples is None:
        samples = select_split(load_samples(cfg), split, cfg.split_seed)
    result, preds = evaluate_samples(model, samples)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.write_json(out / f"metrics_{split}.json")
        gts = [GroundTruth(s.boxes, s.labels) for s in samples]
        write_match_dump(out / f"matches_{split}.csv", preds, gts, [s.id for s in samples])
    return result


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("L")
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc


def draw_detections(image: np.ndarray, det: Detections, class_names=CLASS_NAMES) -> Image.Image:
    canvas = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for box, score, label in zip(det.boxes, det.scores, det.labels):
        color = CLASS_COLORS.get(int(label), (255, 255, 0))
        x1, y1, x2, y2 = (float(v) for v in box)
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        draw.text((x1 + 2, max(0.0, y1 - 11)), f"{class_names[int(label)]} {score:.2f}", fill=color)
    return canvas


def infer(ckpt, image_path, out_path, model: Optional[FeedbackDetector] = None) -> Detections:
    """Detect lesions in one image, save an overlay to ``out_path`` and a JSON next to it."""
    if model is None:
        model, _ = load_model(ckpt)
    image = read_image(image_path)
    det = detect(model, Sample(image, np.zeros((0, 4)), np.zeros((0,), dtype=np.int64), Path(image_path).stem))
    draw_detections(image, det).save(out_path)
    records = [
        {"bbox": [float(v) for v in b], "score": float(s), "label": CLASS_NAMES[int(l)]}
        for b, s, l in zip(det.boxes, det.scores, det.labels)
    ]
    Path(out_path).with_suffix(".json").write_text(json.dumps(records, indent=1))
    return det
