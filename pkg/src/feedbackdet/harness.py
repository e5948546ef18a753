"""Randomised invariant checks across the whole detector.

Each check returns a :class:`PropertyReport`; ``pass`` holds iff the largest
deviation seen over all trials is within tolerance. Checks are deterministic
given the seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import LEVELS, STRIDES, TrainConfig, model_preset
from .evaluation import IOU_THRESHOLDS, Detections, GroundTruth, coco_ap, nms
from .head import HeadOutputs, decode
from .loss import centerness_target, detection_loss, sigmoid_focal_loss
from .model import FeedbackDetector
from .pyramid import convex_fuse
from .selection import FeedbackSelection
from .surround_conv import CENTER, sample_positions, surround_deform_conv2d
from .train import lr_at


@dataclass
class PropertyReport:
    property: str
    trials: int
    max_deviation: float
    tolerance: float
    passed: bool
    seed: int
    seconds: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return json.dumps(d)


def _report(name, trials, deviations, tol, seed, t0) -> PropertyReport:
    dev = max(deviations) if deviations else 0.0
    dev = float(dev) if math.isfinite(dev) else float("inf")
    return PropertyReport(name, trials, dev, tol, dev <= tol, seed, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# pyramid / selection

def check_zero_feedback_fixed_point(seed: int, trials: int = 3, images: int = 10,
                                    size: Tuple[int, int] = (256, 320)) -> PropertyReport:
    """With forced-zero feedback the fused maps equal the phase-1 pyramid at every level."""
    t0 = time.perf_counter()
    devs = []
    for t in range(trials):
        torch.manual_seed(seed + t)
        cfg = model_preset("tiny")
        cfg.force_zero_feedback = True
        model = FeedbackDetector(cfg).eval()
        # make the feedback path non-trivial so the check means something
        for conv in model.backbone.feedback_convs.values():
            torch.nn.init.normal_(conv.weight, std=0.05)
            torch.nn.init.normal_(conv.bias, std=0.05)
        x = torch.rand(images, 3, *size)
        with torch.no_grad():
            for i in range(images):
                out = model.pyramid.run_two_phase(model.normalize(x[i:i + 1]))
                devs.append(max((out.fused[l] - out.phase1[l]).abs().max().item() for l in LEVELS))
    return _report("zero_feedback_fixed_point", trials * images, devs, 1e-5, seed, t0)


def check_fusion_convexity(seed: int, trials: int = 1, entries: int = 1_000_000) -> PropertyReport:
    """min(P1, P2) <= F <= max(P1, P2) exactly, and P1 == P2 gives F == P1 bitwise."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    devs = []
    for _ in range(trials):
        scale = torch.exp(torch.randn(entries, generator=g) * 4)
        p1 = torch.randn(entries, generator=g) * scale
        p2 = torch.randn(entries, generator=g) * scale
        w = torch.rand(entries, generator=g)
        w[: entries // 100] = 0.0
        w[entries // 100: entries // 50] = 1.0
        f = convex_fuse(p1, p2, w)
        lo, hi = torch.minimum(p1, p2), torch.maximum(p1, p2)
        devs.append(float(((lo - f).clamp(min=0) + (f - hi).clamp(min=0)).max()))
        same = convex_fuse(p1, p1.clone(), w)
        devs.append(float((same != p1).sum()))
    return _report("fusion_convexity", trials, devs, 0.0, seed, t0)


def check_attention_bounds(seed: int, trials: int = 10) -> PropertyReport:
    """sigma1 and sigma2 stay strictly inside (0, 1), including for saturating inputs.

    Deviation counts the entries that reach 0 or 1.
    """
    t0 = time.perf_counter()
    devs = []
    for t in range(trials):
        torch.manual_seed(seed + t)
        sel = FeedbackSelection(16, (3, 6))
        scale = 10.0 ** (t % 5)  # up to 1e4: sigmoid saturates in float32
        p = torch.randn(2, 16, 12, 14) * scale
        with torch.no_grad():
            _, parts = sel(p, return_parts=True)
        bad = 0
        for key in ("sigma1", "sigma2"):
            s = parts[key]
            bad += int(((s <= 0) | (s >= 1)).sum())
        devs.append(float(bad))
    return _report("attention_strictly_open", trials, devs, 0.0, seed, t0)


# ---------------------------------------------------------------------------
# surround convolution

def check_surround_zero_offset(seed: int, trials: int = 5) -> PropertyReport:
    """Zero offsets reduce the layer to a dense padded 3x3 convolution."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    devs = []
    for _ in range(trials):
        c, o = int(torch.randint(1, 9, (1,), generator=g)), int(torch.randint(1, 9, (1,), generator=g))
        h, w = (int(v) for v in torch.randint(3, 17, (2,), generator=g))
        x = torch.randn(2, c, h, w, generator=g)
        weight = torch.randn(o, c, 3, 3, generator=g)
        bias = torch.randn(o, generator=g)
        raw = -torch.rand(2, 8, h, w, generator=g)  # negative raw clamps to zero displacement
        y = surround_deform_conv2d(x, raw, weight, bias, 3.0)
        devs.append(float((y - F.conv2d(x, weight, bias, padding=1)).abs().max()))
    return _report("surround_zero_offset_dense", trials, devs, 1e-5, seed, t0)


def check_surround_radius(seed: int, trials: int = 5, tau: float = 3.0) -> PropertyReport:
    """Every tap lies within Chebyshev distance 1 + tau of its base; the centre tap is exact."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    devs = []
    for _ in range(trials):
        raw = torch.randn(3, 8, 9, 11, generator=g, dtype=torch.float64) * 10
        pos = sample_positions(raw, tau)
        h, w = raw.shape[-2:]
        ys = torch.arange(h, dtype=raw.dtype).view(1, 1, h, 1)
        xs = torch.arange(w, dtype=raw.dtype).view(1, 1, 1, w)
        dy, dx = pos[:, :, 0] - ys, pos[:, :, 1] - xs
        cheb = torch.maximum(dy.abs(), dx.abs())
        devs.append(float((cheb - (1 + tau)).clamp(min=0).max()))
        devs.append(float(cheb[:, CENTER].max()))
    return _report("surround_sample_radius", trials, devs, 0.0, seed, t0)


def _offsets_away_from_kinks(shape, g, tau, dtype, eps):
    """Raw offsets inside (0, tau) whose sample positions are not near integer grid lines."""
    raw = torch.rand(shape, generator=g, dtype=torch.float64) * (tau - 0.4) + 0.2
    for _ in range(100):
        pos = sample_positions(raw, tau)
        frac = pos - pos.floor()
        near = ((frac < 4 * eps) | (frac > 1 - 4 * eps)).any(dim=2)  # [b, 9, h, w]
        near = torch.cat([near[:, :CENTER], near[:, CENTER + 1:]], dim=1)
        if not near.any():
            break
        fresh = torch.rand(shape, generator=g, dtype=torch.float64) * (tau - 0.4) + 0.2
        raw = torch.where(near, fresh, raw)
    return raw.to(dtype)


def finite_difference_error(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                            eps: float = 1e-3) -> float:
    """Norm-wise relative error of autograd against central differences.

    max |analytic - numeric| over every entry of every input, divided by the largest
    numeric gradient entry. ``fn`` must return a scalar.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs)
    err, scale = 0.0, 0.0
    for x, ga in zip(inputs, analytic):
        numeric = torch.zeros_like(x, dtype=torch.float64)
        flat = x.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            with torch.no_grad():
                fp = fn(*inputs).double().item()
            flat[i] = old - eps
            with torch.no_grad():
                fm = fn(*inputs).double().item()
            flat[i] = old
            numeric.view(-1)[i] = (fp - fm) / (2 * eps)
        scale = max(scale, numeric.abs().max().item())
        err = max(err, (ga.double() - numeric).abs().max().item())
    return err / max(scale, 1e-12)


def check_surround_gradients(seed: int, trials: int = 2, dtype=torch.float32) -> PropertyReport:
    """Central differences (eps=1e-3) vs autograd for inputs, weights and raw offsets on 2x4x5x5."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    eps = 1e-3
    tau = 3.0
    devs = []
    for _ in range(trials):
        x = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64).to(dtype)
        weight = (torch.randn(3, 4, 3, 3, generator=g, dtype=torch.float64) * 0.5).to(dtype)
        bias = torch.randn(3, generator=g, dtype=torch.float64).to(dtype)
        raw = _offsets_away_from_kinks((2, 8, 5, 5), g, tau, dtype, eps)
        probe = torch.randn(2, 3, 5, 5, generator=g, dtype=torch.float64).to(dtype)

        def fn(x_, w_, b_, r_):
            return (surround_deform_conv2d(x_, r_, w_, b_, tau) * probe).sum()

        devs.append(finite_difference_error(fn, [x, weight, bias, raw], eps))
    tol = 1e-3 if dtype == torch.float32 else 1e-5
    bits = 32 if dtype == torch.float32 else 64
    return _report(f"surround_gradcheck_fp{bits}", trials, devs, tol, seed, t0)


# ---------------------------------------------------------------------------
# head / loss

def check_anchor_containment(seed: int, trials: int = 1, locations: int = 10_000) -> PropertyReport:
    """Decoded (unclipped) boxes contain their anchor point. Deviation = fraction that do not."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    devs = []
    # level grids whose sizes add up to at least ``locations``
    sizes = [(80, 100), (40, 50), (20, 25), (10, 13), (5, 7)]
    n = sum(h * w for h, w in sizes)
    assert n >= locations
    for _ in range(trials):
        cls = [torch.randn(1, 2, h, w, generator=g) * 6 for h, w in sizes]
        reg = [torch.randn(1, 4, h, w, generator=g) * 8 for h, w in sizes]
        ctn = [torch.randn(1, 1, h, w, generator=g) * 6 for h, w in sizes]
        cand = decode(HeadOutputs(cls, reg, ctn, STRIDES), None, score_thresh=-1.0, pre_nms_topk=10 ** 9)[0]
        b, p = cand.boxes, cand.points
        ok = (b[:, 0] <= p[:, 0]) & (p[:, 0] <= b[:, 2]) & (b[:, 1] <= p[:, 1]) & (p[:, 1] <= b[:, 3])
        ok &= torch.isfinite(b).all(dim=1)
        devs.append(1.0 - ok.double().mean().item())
        if len(b) != 2 * n:
            devs.append(1.0)
    return _report("anchor_containment", trials * n * 2, devs, 0.0, seed, t0)


def check_loss_closed_forms(seed: int) -> PropertyReport:
    """Focal term at p=0.9 on the true class and two center-ness closed forms."""
    t0 = time.perf_counter()
    p = 0.9
    logit = torch.tensor([math.log(p / (1 - p))], dtype=torch.float32)
    focal = sigmoid_focal_loss(logit, torch.ones(1)).item()
    expected = -0.25 * (1 - p) ** 2 * math.log(p)
    # ltrb order: (l, t, r, b)
    c1 = centerness_target(torch.tensor([1.0, 2.0, 3.0, 2.0])).item()
    c2 = centerness_target(torch.tensor([1.0, 1.0, 9.0, 9.0])).item()
    devs = [abs(focal - expected), abs(c1 - math.sqrt(1 / 3)), abs(c2 - 1 / 9)]
    return _report("loss_closed_forms", 3, devs, 1e-6, seed, t0)


def check_loss_no_positive(seed: int, trials: int = 5) -> PropertyReport:
    """No positives: finite total, reg and ctn exactly zero, and backward works."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    devs = []
    for _ in range(trials):
        n = 50
        cls = torch.randn(n, 2, generator=g).requires_grad_(True)
        dist = torch.rand(n, 4, generator=g).add(0.1).requires_grad_(True)
        ctn = torch.randn(n, generator=g).requires_grad_(True)
        parts = detection_loss(cls, dist, ctn, torch.zeros(n, dtype=torch.long), torch.ones(n, 4), torch.zeros(n))
        parts.total.backward()
        dev = abs(parts.reg.item()) + abs(parts.ctn.item())
        if not math.isfinite(parts.total.item()) or not torch.isfinite(cls.grad).all():
            dev = float("inf")
        devs.append(dev)
    return _report("loss_zero_positives", trials, devs, 0.0, seed, t0)


def check_loss_gradients(seed: int, trials: int = 3) -> PropertyReport:
    """Finite differences of the total loss wrt raw head outputs on a 2-location toy case (float32)."""
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(seed)
    devs = []
    labels = torch.tensor([1, 0])
    reg_t = torch.tensor([[3.0, 5.0, 7.0, 2.0], [1.0, 1.0, 1.0, 1.0]])
    ctn_t = centerness_target(reg_t)
    for _ in range(trials):
        cls = torch.randn(2, 2, generator=g)
        reg = torch.randn(2, 4, generator=g) * 0.5 + 1.0
        # min/max in the overlap are not differentiable where prediction meets target
        while (torch.exp(reg[0]) - reg_t[0]).abs().min() < 0.05:
            reg[0] = torch.randn(4, generator=g) * 0.5 + 1.0
        ctn = torch.randn(2, generator=g)

        def fn(c, r, o):
            return detection_loss(c, torch.exp(r), o, labels, reg_t, ctn_t).total

        devs.append(finite_difference_error(fn, [cls, reg, ctn], 1e-3))
    return _report("loss_gradcheck_fp32", trials, devs, 1e-3, seed, t0)


# ---------------------------------------------------------------------------
# evaluation

def _box_iou_exact(a, b) -> Fraction:
    a = [Fraction(float(v)) for v in a]
    b = [Fraction(float(v)) for v in b]
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def oracle_ap(preds: Sequence[Detections], gts: Sequence[GroundTruth], cls: int, thr: float) -> Fraction:
    """Exact-arithmetic AP for one class and threshold, written independently of the evaluator.

    For every prefix of the score ranking the greedy matching is redone from scratch,
    precision/recall are exact fractions and the envelope is an explicit max over the tail.
    """
    thr = Fraction(str(thr))
    ranked = []
    for img, det in enumerate(preds):
        for d in range(len(det.labels)):
            if int(det.labels[d]) == cls:
                ranked.append((-float(det.scores[d]), img, d))
    ranked.sort(key=lambda r: r[0])  # Python sort is stable: ties keep image/detection order
    n_gt = sum(int(np.sum(np.asarray(g.labels) == cls)) for g in gts)

    def true_positives(k):
        taken = set()
        tp = 0
        for _, img, d in ranked[:k]:
            best, best_iou = None, None
            for gi in range(len(gts[img].labels)):
                if int(gts[img].labels[gi]) != cls or (img, gi) in taken:
                    continue
                v = _box_iou_exact(preds[img].boxes[d], gts[img].boxes[gi])
                if v >= thr and (best_iou is None or v > best_iou):
                    best, best_iou = gi, v
            if best is not None:
                taken.add((img, best))
                tp += 1
        return tp

    tps = [true_positives(k) for k in range(len(ranked) + 1)]
    precision = [Fraction(tps[k], k) for k in range(1, len(ranked) + 1)]
    recall = [Fraction(tps[k], n_gt) for k in range(len(ranked) + 1)]
    total = Fraction(0)
    for k in range(1, len(ranked) + 1):
        envelope = max(precision[k - 1:])
        total += envelope * (recall[k] - recall[k - 1])
    return total


def oracle_coco(preds, gts, num_classes: int = 2) -> Dict[str, float]:
    classes = [c for c in range(num_classes) if any(np.any(np.asarray(g.labels) == c) for g in gts)]
    table = {(c, t): oracle_ap(preds, gts, c, t) for c in classes for t in IOU_THRESHOLDS}
    n = len(classes)
    return {
        "AP": float(sum(table.values()) / (n * len(IOU_THRESHOLDS))),
        "AP50": float(sum(table[(c, 0.5)] for c in classes) / n),
        "AP75": float(sum(table[(c, 0.75)] for c in classes) / n),
    }


def random_scene(rng: np.random.Generator, max_gts: int = 5, max_preds: int = 8, n_images: int = 2):
    """A few images with at most ``max_gts`` boxes and ``max_preds`` detections in total."""
    n_gt = int(rng.integers(1, max_gts + 1))
    n_pred = int(rng.integers(0, max_preds + 1))
    gt_img = rng.integers(0, n_images, n_gt)
    xy = rng.uniform(0, 80, (n_gt, 2))
    wh = rng.uniform(8, 40, (n_gt, 2))
    gt_boxes = np.concatenate([xy, xy + wh], 1)
    gt_labels = rng.integers(0, 2, n_gt)
    pred_img, pred_boxes, pred_labels = [], [], []
    for _ in range(n_pred):
        if rng.random() < 0.7:
            j = int(rng.integers(0, n_gt))
            w, h = gt_boxes[j, 2] - gt_boxes[j, 0], gt_boxes[j, 3] - gt_boxes[j, 1]
            box = gt_boxes[j] + rng.normal(0, 0.12, 4) * np.array([w, h, w, h])
            box = np.array([min(box[0], box[2] - 1), min(box[1], box[3] - 1), max(box[2], box[0] + 1), max(box[3], box[1] + 1)])
            img = int(gt_img[j])
            label = int(gt_labels[j]) if rng.random() < 0.85 else 1 - int(gt_labels[j])
        else:
            xy0 = rng.uniform(0, 80, 2)
            box = np.concatenate([xy0, xy0 + rng.uniform(8, 40, 2)])
            img = int(rng.integers(0, n_images))
            label = int(rng.integers(0, 2))
        pred_img.append(img)
        pred_boxes.append(box)
        pred_labels.append(label)
    scores = rng.uniform(0, 1, n_pred)
    preds, gts = [], []
    for i in range(n_images):
        gm = gt_img == i
        gts.append(GroundTruth(gt_boxes[gm].reshape(-1, 4), gt_labels[gm]))
        pm = np.asarray(pred_img, dtype=int) == i
        pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
        preds.append(Detections(pb[pm], scores[pm], np.asarray(pred_labels, dtype=np.int64)[pm]))
    return preds, gts


def check_ap_oracle(seed: int, trials: int = 100) -> PropertyReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    devs = []
    for _ in range(trials):
        preds, gts = random_scene(rng)
        got = coco_ap(preds, gts).metrics()
        want = oracle_coco(preds, gts)
        devs.append(max(abs(got[k] - want[k]) for k in ("AP", "AP50", "AP75")))
    return _report("ap_matches_exhaustive_oracle", trials, devs, 1e-9, seed, t0)


def check_ap_crafted(seed: int) -> PropertyReport:
    """One prediction overlapping its gt at IoU 0.6: AP50 = 1, AP75 = 0."""
    t0 = time.perf_counter()
    gt = GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([0]))
    # [0, 0, 10, 6] inside the gt: IoU = 60 / 100
    pred = Detections(np.array([[0.0, 0.0, 10.0, 6.0]]), np.array([0.9]), np.array([0]))
    r = coco_ap([pred], [gt])
    devs = [abs(r.AP50 - 1.0), abs(r.AP75 - 0.0)]
    return _report("ap_crafted_iou_0.6", 1, devs, 0.0, seed, t0)


def check_ap_101_agreement(seed: int, trials: int = 100) -> PropertyReport:
    """All-point and 101-point interpolation agree within 0.02 on random scenes."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    devs = []
    for _ in range(trials):
        preds, gts = random_scene(rng, max_gts=40, max_preds=60, n_images=6)
        a = coco_ap(preds, gts, interpolation="all")
        b = coco_ap(preds, gts, interpolation="101")
        devs.append(max(abs(a.AP - b.AP), abs(a.AP50 - b.AP50), abs(a.AP75 - b.AP75)))
    return _report("ap_101_point_agreement", trials, devs, 0.02, seed, t0)


def check_nms_permutation(seed: int, trials: int = 50) -> PropertyReport:
    """NMS keeps the same boxes whatever the input order (distinct scores)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    devs = []
    for _ in range(trials):
        n = int(rng.integers(1, 30))
        xy = rng.uniform(0, 50, (n, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(5, 30, (n, 2))], 1)
        scores = rng.permutation(n) / n + 0.01
        labels = rng.integers(0, 2, n)
        keep = {tuple(boxes[i]) for i in nms(boxes, scores, labels)}
        perm = rng.permutation(n)
        keep2 = {tuple(boxes[perm][i]) for i in nms(boxes[perm], scores[perm], labels[perm])}
        devs.append(float(len(keep ^ keep2)))
    return _report("nms_permutation_invariant", trials, devs, 0.0, seed, t0)


# ---------------------------------------------------------------------------
# schedule

def check_schedule(seed: int) -> PropertyReport:
    t0 = time.perf_counter()
    cfg = TrainConfig()
    cases = {24999: 0.01, 25000: 0.001, 35000: 0.0001}
    devs = [abs(lr_at(s, cfg) - v) for s, v in cases.items()]
    return _report("lr_schedule", len(cases), devs, 0.0, seed, t0)


def run_suite(seed: int = 0, trials: int = 3, include_slow: bool = True) -> List[PropertyReport]:
    """Every invariant with randomised inputs. ``trials`` scales the per-check repetitions."""
    trials = max(1, trials)
    reports = [
        check_zero_feedback_fixed_point(seed, trials) if include_slow else None,
        check_fusion_convexity(seed),
        check_attention_bounds(seed, max(10, trials)),
        check_surround_zero_offset(seed, trials),
        check_surround_radius(seed, trials),
        check_surround_gradients(seed, trials, torch.float32),
        check_surround_gradients(seed, trials, torch.float64),
        check_anchor_containment(seed),
        check_loss_closed_forms(seed),
        check_loss_no_positive(seed, trials),
        check_loss_gradients(seed, trials),
        check_ap_oracle(seed, max(100, trials)),
        check_ap_crafted(seed),
        check_ap_101_agreement(seed, max(100, trials)),
        check_nms_permutation(seed, trials),
        check_schedule(seed),
    ]
    return [r for r in reports if r is not None]
