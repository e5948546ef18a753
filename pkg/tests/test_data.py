import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from feedbackdet.data import (
    DatasetError, Sample, hflip, load_dataset, random_hflip, resize_pad, save_dataset, split, synth_ultrasound,
)


def blank(h, w, boxes=((10, 10, 50, 40),), labels=(0,)):
    return Sample(np.zeros((h, w), np.uint8), np.asarray(boxes, float).reshape(-1, 4), np.asarray(labels), "x")


def test_split_sizes():
    tr, va, te = split(list(range(1023)), seed=0)
    assert (len(tr), len(va), len(te)) == (613, 204, 206)
    assert sorted(tr + va + te) == list(range(1023))
    assert split(list(range(1023)), seed=0)[0] == tr
    assert split(list(range(1023)), seed=1)[0] != tr
    with pytest.raises(ValueError):
        split([1, 2, 3], 0)


def test_resize_pad_example():
    s = blank(573, 710, [(0, 0, 710, 573)])
    out, tf = resize_pad(s, (800, 1024))
    assert tf.scale_x == pytest.approx(1.39616, abs=1e-5)
    assert out.image.shape == (800, 1024)
    assert np.allclose(out.boxes, [[0, 0, 991, 800]], atol=0.5)


def test_resize_pad_padding_is_zero_bottom_right():
    s = Sample(np.full((100, 200), 255, np.uint8), np.zeros((0, 4)), np.zeros(0, int), "x")
    out, tf = resize_pad(s, (256, 320))
    # s = min(2.56, 1.6) = 1.6 -> content 160 x 320
    assert out.image[:160].min() == 255 and out.image[160:].max() == 0


def test_stretch_mode():
    s = blank(100, 200)
    out, tf = resize_pad(s, (256, 320), stretch=True)
    assert (tf.scale_y, tf.scale_x) == (2.56, 1.6)
    assert out.image.shape == (256, 320) and np.allclose(out.boxes[0], [16, 25.6, 80, 102.4])


@settings(max_examples=60, deadline=None)
@given(st.integers(64, 1500), st.integers(64, 1500), st.floats(0, 0.45), st.floats(0, 0.45), st.floats(0.5, 0.99),
       st.floats(0.5, 0.99))
def test_transform_roundtrip(h, w, fx1, fy1, fx2, fy2):
    s = blank(h, w, [(fx1 * w, fy1 * h, fx2 * w, fy2 * h)])
    out, tf = resize_pad(s, (800, 1024))
    assert np.abs(tf.to_original(out.boxes) - s.boxes).max() <= 0.5
    ch, cw = round(h * tf.scale_y), round(w * tf.scale_x)
    assert ch <= 800 and cw <= 1024 and (ch == 800 or cw == 1024)


def test_hflip_example():
    s = blank(800, 1024, [(100, 5, 200, 50)])
    f = hflip(s)
    assert f.boxes.tolist() == [[824, 5, 924, 50]]
    assert np.array_equal(hflip(f).image, s.image) and np.array_equal(hflip(f).boxes, s.boxes)


def test_random_hflip_probability():
    rng = np.random.default_rng(0)
    s = blank(64, 64)
    flips = sum(random_hflip(s, rng).boxes[0, 0] != s.boxes[0, 0] for _ in range(400))
    assert 150 < flips < 250
    assert random_hflip(s, rng, p=0.0) is s


def test_synth_deterministic_and_valid():
    a = synth_ultrasound(7, 12)
    b = synth_ultrasound(7, 12)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.boxes, y.boxes)
    for s in a:
        h, w = s.image.shape
        assert 1 <= len(s.labels) <= 3
        assert (s.boxes[:, 0] >= 0).all() and (s.boxes[:, 2] <= w).all()
        assert (s.boxes[:, 1] >= 0).all() and (s.boxes[:, 3] <= h).all()
        assert (s.boxes[:, 2] > s.boxes[:, 0]).all() and (s.boxes[:, 3] > s.boxes[:, 1]).all()
    assert not np.array_equal(a[0].image, synth_ultrasound(8, 1)[0].image)


def test_synth_class_balance():
    labels = np.concatenate([s.labels for s in synth_ultrasound(0, 200)])
    assert abs(labels.mean() - 0.5) <= 0.1


def test_synth_lesion_appearance():
    # benign interiors are brighter than the image, malignant ones darker
    bright, dark = [], []
    for s in synth_ultrasound(3, 30):
        img = s.image.astype(float)
        for (x1, y1, x2, y2), lab in zip(s.boxes.astype(int), s.labels):
            cy, cx = (y1 + y2) // 2, (x1 + x2) // 2
            core = img[cy - 3:cy + 4, cx - 3:cx + 4].mean()
            (bright if lab == 0 else dark).append(core - img.mean())
    assert min(bright) > 0 and max(dark) < 0


def test_save_load_roundtrip(tmp_path):
    samples = synth_ultrasound(1, 4)
    path = save_dataset(samples, tmp_path)
    loaded = load_dataset(path)
    for a, b in zip(samples, loaded):
        assert a.id == b.id and np.array_equal(a.image, b.image)
        assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.labels, b.labels)


def test_load_reports_every_error(tmp_path):
    Image.fromarray(np.zeros((20, 30), np.uint8)).save(tmp_path / "a.png")
    doc = {
        "images": [{"id": "a", "file": "a.png", "width": 30, "height": 20},
                   {"id": "b", "file": "missing.png", "width": 5, "height": 5}],
        "annotations": [
            {"image_id": "a", "bbox": [1, 1, 10, 10], "label": "benign"},
            {"image_id": "a", "bbox": [5, 5, 5, 9], "label": "benign"},
            {"image_id": "a", "bbox": [1, 1, 40, 10], "label": "malignant"},
            {"image_id": "a", "bbox": [1, 1, 4, 4], "label": "cyst"},
            {"image_id": "zzz", "bbox": [1, 1, 4, 4], "label": "benign"},
        ],
    }
    (tmp_path / "ann.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError) as info:
        load_dataset(tmp_path / "ann.json")
    errs = info.value.errors
    assert len(errs) == 5
    joined = "\n".join(errs)
    for needle in ("missing.png", "degenerate", "outside", "cyst", "zzz"):
        assert needle in joined


def test_load_rejects_bad_json(tmp_path):
    (tmp_path / "a.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "a.json")
