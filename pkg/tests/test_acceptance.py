"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line (printed inline and again in the pytest terminal
summary). Criteria 8 and 10 train two tiny models on 50 synthetic images, which takes
tens of minutes on one CPU core; both models are trained once per session.
"""

import time

import numpy as np
import pytest
import torch

from conftest import record_criterion
from feedbackdet.config import TrainConfig, model_preset
from feedbackdet.data import synth_ultrasound
from feedbackdet.fps import fps_benchmark, hardware_descriptor
from feedbackdet.gradcam import cam_mass, grad_cam
from feedbackdet.harness import (
    check_anchor_containment, check_ap_101_agreement, check_ap_crafted, check_ap_oracle, check_attention_bounds,
    check_fusion_convexity, check_loss_closed_forms, check_loss_gradients, check_loss_no_positive,
    check_schedule, check_surround_gradients, check_surround_radius, check_surround_zero_offset,
    check_zero_feedback_fixed_point,
)
from feedbackdet.inference import evaluate_samples
from feedbackdet.model import FeedbackDetector
from feedbackdet.train import lr_at, prepare, to_tensor, train

SEEDS = (0, 1, 2)
DESK_STEPS = 2000
DESK_IMAGES = 50
DESK_BUDGET_S = 30 * 60


def _summary(reports):
    return "; ".join(f"{r.property} dev={r.max_deviation:.3g} tol={r.tolerance:g}" for r in reports)


def test_01_zero_feedback_fixed_point():
    t0 = time.perf_counter()
    reports = [check_zero_feedback_fixed_point(s, trials=1, images=10, size=(256, 320)) for s in SEEDS]
    seconds = time.perf_counter() - t0
    worst = max(r.max_deviation for r in reports)
    ok = all(r.passed for r in reports) and seconds < 120
    record_criterion(1, "zero-feedback fixed point", ok,
                     f"max|F-P1|={worst:.3g} (<=1e-5) over 10 images x {len(SEEDS)} seeds in {seconds:.1f}s (<120s)")
    assert ok


def test_02_surround_conv():
    t0 = time.perf_counter()
    reports = [
        check_surround_zero_offset(0, trials=5),
        check_surround_radius(0, trials=5),
        check_surround_gradients(0, trials=3, dtype=torch.float32),
        check_surround_gradients(0, trials=3, dtype=torch.float64),
    ]
    seconds = time.perf_counter() - t0
    ok = all(r.passed for r in reports) and seconds < 300
    record_criterion(2, "surround conv", ok, f"{_summary(reports)}; {seconds:.1f}s (<300s)")
    assert ok


def test_03_fusion_convexity():
    r = check_fusion_convexity(0, entries=1_000_000)
    record_criterion(3, "fusion convexity", r.passed, _summary([r]))
    assert r.passed


def test_04_attention_bounds():
    reports = [check_attention_bounds(s, trials=1) for s in range(10)]
    ok = all(r.passed for r in reports)
    record_criterion(4, "attention strictly in (0,1)", ok, f"10 seeds; {_summary(reports[:1])}")
    assert ok


def test_05_anchor_containment():
    r = check_anchor_containment(0, locations=10_000)
    record_criterion(5, "positive locations inside their box", r.passed, _summary([r]))
    assert r.passed


def test_06_loss():
    reports = [check_loss_closed_forms(0), check_loss_no_positive(0), check_loss_gradients(0, trials=3)]
    ok = all(r.passed for r in reports)
    record_criterion(6, "loss closed forms / N_pos=0 / gradients", ok, _summary(reports))
    assert ok


def test_07_ap():
    reports = [check_ap_oracle(0, trials=100), check_ap_crafted(0), check_ap_101_agreement(0, trials=100)]
    ok = all(r.passed for r in reports)
    record_criterion(7, "AP oracle / crafted IoU-0.6 / 101-point", ok, _summary(reports))
    assert ok


def test_09_schedule():
    cfg = TrainConfig()
    got = {s: lr_at(s, cfg) for s in (24999, 25000, 35000)}
    ok = got == {24999: 0.01, 25000: 0.001, 35000: 0.0001} and check_schedule(0).passed
    record_criterion(9, "lr schedule", ok, ", ".join(f"lr_at({s})={v!r}" for s, v in got.items()))
    assert ok


# ---------------------------------------------------------------------------
# desk-scale training (criteria 8 and 10)

def desk_config(force_zero: bool) -> TrainConfig:
    cfg = TrainConfig(preset="tiny", model=model_preset("tiny"), total_steps=DESK_STEPS,
                      decay_steps=(1000, 1400), ckpt_every=0, seed=0)
    cfg.model.force_zero_feedback = force_zero
    return cfg


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    samples = synth_ultrasound(0, DESK_IMAGES)
    runs = {}
    for name, fz in (("feedback", False), ("force_zero", True)):
        result = train(desk_config(fz), samples, out_dir=tmp_path_factory.mktemp(name), log_every=250)
        metrics, _ = evaluate_samples(result.model, samples)
        runs[name] = (result, metrics)
    return samples, runs


@pytest.mark.slow
def test_08_desk_scale_learning(desk_runs):
    _, runs = desk_runs
    (on, m_on), (off, m_off) = runs["feedback"], runs["force_zero"]
    slowest = max(on.seconds, off.seconds)
    ok = m_on.AP50 >= 0.85 and m_on.AP50 >= m_off.AP50 - 0.02 and slowest <= DESK_BUDGET_S
    record_criterion(8, "desk-scale learning signal", ok,
                     f"AP50 feedback={m_on.AP50:.3f} (>=0.85), force_zero={m_off.AP50:.3f} "
                     f"(feedback >= force_zero-0.02); train time {on.seconds:.0f}s/{off.seconds:.0f}s "
                     f"(<= {DESK_BUDGET_S}s each)")
    assert ok


def cam_in_out(model, sample, level=3):
    """Summed CAM mass inside/outside the gt boxes, one CAM per class present in the image."""
    image = to_tensor(sample.image)[None]
    inside = outside = 0.0
    for c in np.unique(sample.labels):
        cam = grad_cam(model, image, int(c), level)
        i, o = cam_mass(cam.heatmap, sample.boxes[sample.labels == c])
        inside, outside = inside + i, outside + o
    return inside, outside


@pytest.mark.slow
def test_10_gradcam_sanity(desk_runs):
    samples, runs = desk_runs
    result, _ = runs["feedback"]
    cfg = desk_config(False)
    data = prepare(samples, cfg)
    hits = sum(int(i > o) for i, o in (cam_in_out(result.model, s) for s in data))
    frac = hits / len(data)
    ok = frac >= 0.70
    record_criterion(10, "Grad-CAM in-box mass", ok,
                     f"in-box > out-box on {hits}/{len(data)} = {frac:.0%} of training images (>=70%), level P3")
    assert ok


# ---------------------------------------------------------------------------
# FPS harness

def test_11_fps_harness():
    def stub(_):
        time.sleep(0.025)

    stub_report = fps_benchmark(stub, [None], warmup=3, iters=20)
    stub_ok = abs(stub_report.fps - 40.0) <= 4.0

    with pytest.raises(ValueError):
        fps_benchmark(stub, [None], warmup=0, iters=9)

    calls = []
    slow_warmup = fps_benchmark(lambda _: (time.sleep(0.2 if len(calls) < 2 else 0.0), calls.append(1)),
                                [None], warmup=2, iters=10)
    warmup_ok = len(calls) == 12 and len(slow_warmup.latencies_ms) == 10 and max(slow_warmup.latencies_ms) < 100

    torch.manual_seed(0)
    model = FeedbackDetector(model_preset("full")).eval()
    h, w = model.cfg.image_size
    gen = torch.Generator().manual_seed(0)
    images = [torch.rand(1, 1, h, w, generator=gen) for _ in range(2)]
    real = fps_benchmark(lambda x: model.predict(x), images, warmup=1, iters=10)
    real_ok = real.fps > 0 and bool(real.hardware) and real.hardware == hardware_descriptor()

    ok = stub_ok and warmup_ok and real_ok
    record_criterion(11, "FPS harness", ok,
                     f"25 ms stub -> {stub_report.fps:.2f} FPS (40 +/- 10%); iters<10 rejected; warmup excluded; "
                     f"full model {h}x{w}: {real.fps:.3f} FPS (median {real.median_ms:.0f} ms) on {real.hardware}")
    assert ok
