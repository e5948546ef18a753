import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from feedbackdet.config import ConfigError, ShapeError
from feedbackdet.selection import ASPP, FeedbackSelection, open_sigmoid


def test_aspp_shape_and_branches():
    torch.manual_seed(0)
    aspp = ASPP(16, (3, 6))
    x = torch.randn(2, 16, 11, 13)
    a = aspp(x)
    assert a.shape == x.shape
    # pooled branch is spatially constant
    g = a[:, 12:]
    assert torch.allclose(g, g[..., :1, :1].expand_as(g))


def test_aspp_width_must_divide_by_four():
    with pytest.raises(ConfigError):
        ASPP(18)


def test_aspp_channel_mismatch():
    with pytest.raises(ShapeError):
        ASPP(16)(torch.zeros(1, 8, 4, 4))


def test_selection_shapes_and_parts():
    torch.manual_seed(0)
    sel = FeedbackSelection(16)
    p = torch.randn(2, 16, 9, 10)
    r, parts = sel(p, return_parts=True)
    assert r.shape == p.shape
    assert parts["sigma1"].shape == (2, 16, 1, 1)
    assert parts["sigma2"].shape == (2, 16, 9, 10)
    assert torch.allclose(r, parts["A"] * parts["sigma1"] * parts["sigma2"])


@pytest.mark.parametrize("s1,s2", [(False, False), (True, False), (False, True)])
def test_ablation_switches(s1, s2):
    torch.manual_seed(0)
    sel = FeedbackSelection(16, enable_sigma1=s1, enable_sigma2=s2)
    r, parts = sel(torch.randn(1, 16, 6, 6), return_parts=True)
    assert ("sigma1" in parts) == s1 and ("sigma2" in parts) == s2
    expected = parts["A"]
    for key in ("sigma1", "sigma2"):
        if key in parts:
            expected = expected * parts[key]
    assert torch.equal(r, expected)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e30, 1e30, allow_nan=False))
def test_open_sigmoid_strict(v):
    for dtype in (torch.float32, torch.float64):
        s = open_sigmoid(torch.tensor([v], dtype=dtype))
        assert 0 < s.item() < 1


def test_open_sigmoid_matches_sigmoid_in_range():
    x = torch.linspace(-10, 10, 101)
    assert torch.equal(open_sigmoid(x), torch.sigmoid(x))


@pytest.mark.parametrize("scale", [1.0, 1e3, 1e6])
def test_attention_strictly_open_on_large_inputs(scale):
    torch.manual_seed(1)
    sel = FeedbackSelection(16)
    with torch.no_grad():
        _, parts = sel(torch.randn(2, 16, 8, 8) * scale, return_parts=True)
    for key in ("sigma1", "sigma2"):
        assert (parts[key] > 0).all() and (parts[key] < 1).all()
