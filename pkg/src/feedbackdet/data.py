"""Annotation loading, splitting, geometric preprocessing and a synthetic ultrasound generator.

Annotation format (one JSON file, image paths relative to it)::

    {
      "images": [{"id": "img001", "file": "img001.png", "width": 710, "height": 573}],
      "annotations": [{"image_id": "img001", "bbox": [x1, y1, x2, y2], "label": "benign"}]
    }

Boxes are pixel corner coordinates; labels are ``benign`` or ``malignant``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import CLASS_NAMES


class DatasetError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} annotation error(s):\n" + "\n".join(self.errors))


@dataclass
class Sample:
    image: np.ndarray  # [H, W] or [H, W, 3], uint8
    boxes: np.ndarray  # [n, 4] float xyxy pixels
    labels: np.ndarray  # [n] 0-based class index
    id: str

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def _empty_boxes():
    return np.zeros((0, 4), dtype=np.float64), np.zeros((0,), dtype=np.int64)


def load_dataset(path) -> List[Sample]:
    """Read and validate an annotation file; every problem is reported, not just the first."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError([f"{path}: {exc}"]) from exc
    errors: List[str] = []
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DatasetError([f"{path}: expected an object with an 'images' list"])
    annotations = doc.get("annotations", [])
    root = path.parent

    images = {}
    order = []
    for i, entry in enumerate(doc["images"]):
        where = f"{path}: images[{i}]"
        try:
            img_id, file = str(entry["id"]), entry["file"]
        except (KeyError, TypeError):
            errors.append(f"{where}: needs 'id' and 'file'")
            continue
        if img_id in images:
            errors.append(f"{where}: duplicate id {img_id!r}")
            continue
        try:
            with Image.open(root / file) as im:
                im.load()
                array = np.asarray(im.convert("L") if im.mode not in ("L", "RGB") else im)
        except (OSError, ValueError) as exc:
            errors.append(f"{where}: cannot read image {file!r} ({exc})")
            continue
        h, w = array.shape[:2]
        if ("width" in entry and int(entry["width"]) != w) or ("height" in entry and int(entry["height"]) != h):
            errors.append(f"{where}: declared size {entry.get('width')}x{entry.get('height')} but file is {w}x{h}")
        images[img_id] = array
        order.append(img_id)

    boxes = {k: [] for k in images}
    labels = {k: [] for k in images}
    for i, ann in enumerate(annotations):
        where = f"{path}: annotations[{i}]"
        try:
            img_id = str(ann["image_id"])
            x1, y1, x2, y2 = (float(v) for v in ann["bbox"])
            label = ann["label"]
        except (KeyError, TypeError, ValueError):
            errors.append(f"{where}: needs image_id, bbox [x1,y1,x2,y2] and label")
            continue
        if label not in CLASS_NAMES:
            errors.append(f"{where}: label {label!r} not in {CLASS_NAMES}")
            continue
        if img_id not in images:
            errors.append(f"{where}: unknown image_id {img_id!r}")
            continue
        if not (x1 < x2 and y1 < y2):
            errors.append(f"{where}: degenerate box {[x1, y1, x2, y2]} (need x1<x2, y1<y2)")
            continue
        h, w = images[img_id].shape[:2]
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            errors.append(f"{where}: box {[x1, y1, x2, y2]} outside image {w}x{h}")
            continue
        boxes[img_id].append([x1, y1, x2, y2])
        labels[img_id].append(CLASS_NAMES.index(label))
    if errors:
        raise DatasetError(errors)

    samples = []
    for img_id in order:
        b = np.asarray(boxes[img_id], dtype=np.float64).reshape(-1, 4)
        l = np.asarray(labels[img_id], dtype=np.int64)
        samples.append(Sample(images[img_id], b, l, img_id))
    return samples


def save_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write PNGs plus ``annotations.json`` in the documented format. Returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"images": [], "annotations": []}
    for s in samples:
        file = f"{s.id}.png"
        Image.fromarray(s.image).save(out_dir / file)
        doc["images"].append({"id": s.id, "file": file, "width": int(s.image.shape[1]), "height": int(s.image.shape[0])})
        for box, label in zip(s.boxes, s.labels):
            doc["annotations"].append(
                {"image_id": s.id, "bbox": [float(v) for v in box], "label": CLASS_NAMES[int(label)]}
            )
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def split(samples: Sequence, seed: int = 0, fractions=(0.6, 0.2, 0.2)):
    """Shuffle with ``seed`` and cut into (train, val, test) of sizes floor(0.6n), floor(0.2n), rest."""
    n = len(samples)
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    pick = [samples[i] for i in perm]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


@dataclass(frozen=True)
class Transform:
    """Original -> model coordinates: scale then bottom/right zero padding (no offset)."""

    scale_x: float
    scale_y: float
    original_size: Tuple[int, int]  # (H, W)
    target_size: Tuple[int, int]

    def to_model(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return boxes * np.array([self.scale_x, self.scale_y, self.scale_x, self.scale_y])

    def to_original(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        out = boxes / np.array([self.scale_x, self.scale_y, self.scale_x, self.scale_y])
        h, w = self.original_size
        return np.clip(out, 0, [w, h, w, h])


def resize_pad(sample: Sample, target: Tuple[int, int] = (800, 1024), stretch: bool = False):
    """Aspect-preserving resize by min(th/H, tw/W) then zero-pad to exactly ``target``.

    With ``stretch`` the image is resized to ``target`` directly (per-axis scales).
    Returns ``(sample, transform)``.
    """
    h, w = sample.size
    if h == 0 or w == 0:
        raise ValueError(f"sample {sample.id} has an empty image")
    th, tw = target
    if stretch:
        sy, sx = th / h, tw / w
        ch, cw = th, tw
    else:
        s = min(th / h, tw / w)
        sy = sx = s
        ch, cw = min(th, int(round(h * s))), min(tw, int(round(w * s)))
    tf = Transform(sx, sy, (h, w), (th, tw))
    if (ch, cw) == (h, w) and (th, tw) == (h, w):
        return replace(sample, boxes=sample.boxes.astype(np.float64).copy()), tf
    resized = np.asarray(Image.fromarray(sample.image).resize((cw, ch), Image.BILINEAR))
    canvas = np.zeros((th, tw) + sample.image.shape[2:], dtype=sample.image.dtype)
    canvas[:ch, :cw] = resized
    boxes = tf.to_model(sample.boxes)
    boxes = np.clip(boxes, 0, [cw, ch, cw, ch])
    return Sample(canvas, boxes, sample.labels.copy(), sample.id), tf


def random_hflip(sample: Sample, rng: np.random.Generator, p: float = 0.5) -> Sample:
    """Mirror image and boxes with probability ``p`` (x1' = W - x2, x2' = W - x1)."""
    if p <= 0 or rng.random() >= p:
        return sample
    return hflip(sample)


def hflip(sample: Sample) -> Sample:
    w = sample.image.shape[1]
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    return Sample(np.ascontiguousarray(sample.image[:, ::-1]), boxes, sample.labels.copy(), sample.id)


def image_statistics(samples: Sequence[Sample]) -> Tuple[float, float]:
    """Mean and std of pixel intensities scaled to [0, 1]."""
    total, sq, count = 0.0, 0.0, 0
    for s in samples:
        x = s.image.astype(np.float64) / 255.0
        total += x.sum()
        sq += (x * x).sum()
        count += x.size
    mean = total / count
    return mean, float(np.sqrt(max(sq / count - mean * mean, 1e-12)))


# ---------------------------------------------------------------------------
# synthetic ultrasound

def _lesion_mask(shape, cy, cx, a, b, theta, harmonics):
    """Normalised radius rho (<= 1 inside) of a rotated ellipse with an optionally wavy rim."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    # pixel centres
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    phi = np.arctan2(v, u)
    rim = np.ones_like(phi)
    for k, amp, phase in harmonics:
        rim += amp * np.cos(k * phi + phase)
    return np.hypot(u, v) / rim


def _synth_one(rng: np.random.Generator, size: Tuple[int, int], idx: int) -> Sample:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # smooth tissue background: depth attenuation, tilted ramp, low-frequency texture
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    tissue = 0.42 + 0.10 * ramp - 0.12 * (yy / h) ** 2
    tissue += 0.08 * ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=min(h, w) / 12) * (min(h, w) / 12)

    n_lesions = int(rng.integers(1, 4))
    boxes, labels = [], []
    placed = 0
    for _ in range(40):
        if placed == n_lesions:
            break
        a = rng.uniform(0.05, 0.16) * min(h, w) + 6
        b = a * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        cy = rng.uniform(b + 4, h - b - 4)
        cx = rng.uniform(a + 4, w - a - 4)
        label = int(rng.integers(0, 2))
        if label == 0:
            harmonics = []
        else:
            harmonics = [(k, rng.uniform(0.06, 0.14), rng.uniform(0, 2 * np.pi)) for k in (3, 5, 7)]
        rho = _lesion_mask((h, w), cy, cx, a, b, theta, harmonics)
        inside = rho <= 1.0
        if not inside.any():
            continue
        ys, xs = np.nonzero(inside)
        box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
        if any(_overlaps(box, other, margin=6) for other in boxes):
            continue
        if label == 0:
            # bright, smooth-rimmed
            weight = 1.0 / (1.0 + np.exp((rho - 1.0) * a / 1.5))
            tissue = tissue + 0.33 * weight
        else:
            # dark, irregular hypoechoic core with a hard edge
            tissue = np.where(inside, tissue - 0.27 - 0.05 * (1 - rho), tissue)
        boxes.append(box)
        labels.append(label)
        placed += 1

    # multiplicative speckle (Rayleigh amplitude, unit mean) with slight spatial correlation
    speckle = np.hypot(rng.standard_normal((h, w)), rng.standard_normal((h, w))) / np.sqrt(np.pi / 2)
    speckle = ndimage.gaussian_filter(speckle, sigma=0.7)
    speckle /= speckle.mean()
    img = np.clip(tissue, 0.02, 1.0) * speckle + 0.02 * rng.standard_normal((h, w))
    img = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return Sample(img, b, np.asarray(labels, dtype=np.int64), f"synth_{idx:05d}")


def _overlaps(a, b, margin=0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def synth_ultrasound(seed: int, n: int, size: Tuple[int, int] = (256, 320)) -> List[Sample]:
    """Deterministic speckled grayscale images with 1-3 lesions each.

    benign lesions are bright with a smooth rim, malignant ones dark with an irregular rim;
    the gt box is the tight pixel extent of the lesion mask.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n)
    return [_synth_one(np.random.default_rng(c), size, i) for i, c in enumerate(children)]
