import math

import pytest
import torch

from feedbackdet.config import STRIDES
from feedbackdet.harness import check_loss_closed_forms, check_loss_gradients
from feedbackdet.head import HeadOutputs, level_locations
from feedbackdet.loss import (
    assign_targets, centerness_target, compute_loss, detection_loss, iou_loss, sigmoid_focal_loss,
)


def locations(sizes=((8, 8), (4, 4), (2, 2), (1, 1), (1, 1))):
    return [level_locations(h, w, s) for (h, w), s in zip(sizes, STRIDES)]


def test_focal_closed_form():
    p = 0.9
    v = sigmoid_focal_loss(torch.tensor([math.log(p / (1 - p))]), torch.ones(1)).item()
    assert abs(v - 2.634e-4) < 5e-8
    assert abs(v - (-0.25 * 0.01 * math.log(0.9))) <= 1e-6


@pytest.mark.parametrize("lrtb,expected", [((1, 3, 2, 2), math.sqrt(1 / 3)), ((1, 9, 1, 9), 1 / 9), ((2, 2, 5, 5), 1.0)])
def test_centerness_closed_form(lrtb, expected):
    l, r, t, b = lrtb
    assert abs(centerness_target(torch.tensor([float(l), t, r, b])).item() - expected) <= 1e-6


def test_closed_forms_report():
    assert check_loss_closed_forms(0).passed


def test_iou_loss_perfect_is_zero():
    t = torch.tensor([[3.0, 4.0, 5.0, 6.0]])
    assert iou_loss(t, t).item() == pytest.approx(0.0, abs=1e-6)
    assert iou_loss(t, t, "giou").item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        iou_loss(t, t, "l1")


def test_assignment_outside_is_background():
    t = assign_targets(locations(), torch.tensor([[0.0, 0.0, 10.0, 10.0]]), torch.tensor([1]))
    assert t.labels.sum() > 0
    assert (t.labels[t.labels > 0] == 2).all()
    pos = t.positive.nonzero().squeeze(1)
    assert all(float(v) < 10 for v in torch.cat(locations())[pos].flatten())


def test_assignment_level_range():
    locs = locations(((32, 32), (16, 16), (8, 8), (4, 4), (2, 2)))
    # seen from the P4 location (104, 104): l=100, t=r=b=20
    t = assign_targets(locs, torch.tensor([[4.0, 84.0, 124.0, 124.0]]), torch.tensor([0]))
    counts = [len(l) for l in locs]
    labels = torch.split(t.labels, counts)
    p4 = locs[1].tolist().index([104.0, 104.0])
    assert labels[1][p4] == 1
    p3 = locs[0].tolist().index([100.0, 100.0])
    assert labels[0][p3] == 0
    max_d = torch.split(t.reg.max(dim=1).values, counts)
    for lvl, (lo, hi) in enumerate([(0, 64), (64, 128), (128, 256), (256, 512), (512, math.inf)]):
        m = max_d[lvl][labels[lvl] > 0]
        assert ((m > lo) & (m <= hi)).all()


def test_assignment_smallest_area_wins():
    locs = locations()
    boxes = torch.tensor([[0.0, 0.0, 60.0, 60.0], [10.0, 10.0, 40.0, 40.0]])
    t = assign_targets(locs, boxes, torch.tensor([0, 1]))
    pts = torch.cat(locs)
    inner = (pts[:, 0] > 10) & (pts[:, 0] < 40) & (pts[:, 1] > 10) & (pts[:, 1] < 40)
    lvl3 = torch.arange(len(pts)) < 64
    assert (t.labels[inner & lvl3] == 2).all()


def test_no_positive_path():
    n = 20
    cls = torch.randn(n, 2, requires_grad=True)
    parts = detection_loss(cls, torch.rand(n, 4) + 0.1, torch.randn(n), torch.zeros(n, dtype=torch.long),
                           torch.ones(n, 4), torch.zeros(n))
    assert parts.n_pos == 0
    assert parts.reg.item() == 0.0 and parts.ctn.item() == 0.0
    assert math.isfinite(parts.total.item())
    parts.total.backward()
    assert torch.isfinite(cls.grad).all()


def test_components_nonnegative():
    torch.manual_seed(0)
    sizes = [(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)]
    out = HeadOutputs([torch.randn(2, 2, h, w) for h, w in sizes], [torch.randn(2, 4, h, w) for h, w in sizes],
                      [torch.randn(2, 1, h, w) for h, w in sizes])
    boxes = [torch.tensor([[4.0, 4.0, 40.0, 30.0]]), torch.zeros(0, 4)]
    labels = [torch.tensor([1]), torch.zeros(0, dtype=torch.long)]
    parts = compute_loss(out, boxes, labels)
    assert parts.n_pos > 0
    for v in (parts.cls, parts.reg, parts.ctn):
        assert v.item() >= 0


def test_background_perturbation_changes_only_focal():
    labels = torch.tensor([1, 0])
    reg_t = torch.tensor([[3.0, 5.0, 7.0, 2.0], [1.0, 1.0, 1.0, 1.0]])
    ctn_t = centerness_target(reg_t)
    cls = torch.randn(2, 2)
    dist = torch.rand(2, 4) + 1
    ctn = torch.randn(2)
    a = detection_loss(cls, dist, ctn, labels, reg_t, ctn_t)
    dist2, ctn2, cls2 = dist.clone(), ctn.clone(), cls.clone()
    dist2[1] += 5
    ctn2[1] += 3
    cls2[1] += 1
    b = detection_loss(cls2, dist2, ctn2, labels, reg_t, ctn_t)
    assert a.reg.item() == b.reg.item() and a.ctn.item() == b.ctn.item()
    assert a.cls.item() != b.cls.item()


def test_gradient_check():
    assert check_loss_gradients(seed=2, trials=3).passed
