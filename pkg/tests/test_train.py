import csv
import json

import pytest
import torch

from feedbackdet.config import ConfigError, TrainConfig, model_preset
from feedbackdet.data import synth_ultrasound
from feedbackdet.inference import evaluate, evaluate_samples
from feedbackdet.loss import LossComponents, NonFiniteLossError
from feedbackdet.model import FeedbackDetector
from feedbackdet.train import BatchSampler, load_model, lr_at, prepare, train

SIZE = (128, 160)


def small_cfg(**kw):
    model = model_preset("tiny")
    model.image_size = SIZE
    cfg = TrainConfig(preset="tiny", model=model, batch=2, total_steps=6, decay_steps=(4,), ckpt_every=3,
                      synth_n=10, synth_seed=0, train_split="all", **kw)
    return cfg


@pytest.fixture(scope="module")
def samples():
    return synth_ultrasound(0, 6, SIZE)


@pytest.fixture(scope="module")
def run(samples, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(small_cfg(), samples, out_dir=str(out), log_every=0), out


def test_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.01
    assert lr_at(24999, cfg) == 0.01
    assert lr_at(25000, cfg) == 0.001
    assert lr_at(34999, cfg) == 0.001
    assert lr_at(35000, cfg) == 0.0001
    assert lr_at(49999, cfg) == 0.0001
    for bad in (-1, 50000):
        with pytest.raises(ValueError):
            lr_at(bad, cfg)


def test_warmup_ramp():
    cfg = TrainConfig(warmup_steps=100)
    assert lr_at(0, cfg) == pytest.approx(0.01 / 3)
    assert lr_at(50, cfg) == pytest.approx(0.01 * (1 / 3 + 1 / 3))
    assert lr_at(100, cfg) == 0.01


def test_sampler_depends_on_step_only(samples):
    a = BatchSampler(samples, 4, seed=3)
    b = BatchSampler(samples, 4, seed=3)
    for step in (0, 5, 2, 5):
        xa, ba, _ = a(step)
        xb, bb, _ = b(step)
        assert torch.equal(xa, xb) and all(torch.equal(u, v) for u, v in zip(ba, bb))
    # every sample appears once per epoch
    seen = sum((a.indices(s) for s in range(3)), [])
    assert sorted(seen[:6]) == list(range(6))


def test_loss_csv_and_checkpoints(run):
    result, out = run
    rows = list(csv.reader(open(out / "loss.csv")))
    assert rows[0] == ["step", "total", "cls", "reg", "ctn", "n_pos"]
    assert [int(r[0]) for r in rows[1:]] == list(range(6))
    assert (out / "ckpt_0000003.pt").exists() and (out / "last.pt").exists()
    assert all(torch.isfinite(torch.tensor(h["total"])) for h in result.history)


def test_seeded_runs_identical(run, samples, tmp_path):
    result, _ = run
    again = train(small_cfg(), samples, out_dir=str(tmp_path), log_every=0)
    assert [h["total"] for h in again.history] == [h["total"] for h in result.history]


def test_resume_matches_uninterrupted(run, samples, tmp_path):
    result, out = run
    resumed = train(small_cfg(), samples, resume=str(out / "ckpt_0000003.pt"), out_dir=str(tmp_path), log_every=0)
    assert [h["step"] for h in resumed.history] == [3, 4, 5]
    assert [h["total"] for h in resumed.history] == [h["total"] for h in result.history[3:]]
    for k, v in result.model.state_dict().items():
        assert torch.equal(v, resumed.model.state_dict()[k]), k


def test_checkpoint_roundtrip_reproduces_metrics(run, samples):
    result, out = run
    model, cfg = load_model(out / "last.pt")
    assert cfg.model.image_size == SIZE
    a, _ = evaluate_samples(result.model, samples)
    b = evaluate(out / "last.pt", "train", samples=samples)
    assert a.metrics() == b.metrics()


def test_normalization_from_dataset(run, samples):
    result, _ = run
    mean = result.model.pixel_mean.flatten()
    assert torch.allclose(mean, mean[:1].expand(3))
    assert 0.1 < mean[0] < 0.9


def test_nonfinite_loss_aborts_with_dump(samples, tmp_path, monkeypatch):
    real = FeedbackDetector.loss
    calls = {"n": 0}

    def flaky(self, *args):
        parts = real(self, *args)
        calls["n"] += 1
        if calls["n"] == 5:
            nan = parts.total * float("nan")
            return LossComponents(nan, parts.cls, nan, parts.ctn, parts.n_pos)
        return parts

    monkeypatch.setattr(FeedbackDetector, "loss", flaky)
    with pytest.raises(NonFiniteLossError) as info:
        train(small_cfg(), samples, out_dir=str(tmp_path), log_every=0)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["step"] == 4 and dump["last_good_checkpoint"].endswith("ckpt_0000003.pt")
    assert info.value.components["step"] == 4


def test_rejects_empty_training_set(tmp_path):
    with pytest.raises(ConfigError):
        train(small_cfg(), [], out_dir=str(tmp_path))


def test_untrained_model_scores_near_zero():
    torch.manual_seed(0)
    cfg = small_cfg()
    val = synth_ultrasound(99, 8, SIZE)
    model = FeedbackDetector(cfg.model).eval()
    result, _ = evaluate_samples(model, val)
    assert result.AP < 0.1
    assert set(result.metrics()) >= {"AP", "AP50", "AP75", "AP_benign", "AP_malignant"}


def test_prepare_resizes_to_model_input(samples):
    cfg = small_cfg()
    cfg.model.image_size = (64, 96)
    assert all(s.image.shape == (64, 96) for s in prepare(samples, cfg))
