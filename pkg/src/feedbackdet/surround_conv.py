"""Deformable surround convolution.

A 3x3 convolution whose centre tap is pinned to the output location and whose
eight surround taps slide radially outward along their own fixed unit direction.
Each surround tap k at output position p0 samples

    q_k = p0 + p_k + clamp(raw_k, 0, tau) * p_k / |p_k|

with bilinear interpolation (zero outside the map). ``raw`` holds 8 scalars per
position, predicted by a zero-initialised 3x3 conv, so an untrained layer is an
ordinary padded 3x3 convolution.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

# (dy, dx) in the row-major order of a 3x3 conv kernel
TAPS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
CENTER = 4
SURROUND = tuple(k for k in range(9) if k != CENTER)


def tap_directions(dtype=torch.float32) -> Tensor:
    """Unit direction of each of the 9 taps as (dy, dx); the centre direction is zero."""
    dirs = torch.zeros(9, 2, dtype=torch.float64)
    for k, (dy, dx) in enumerate(TAPS):
        if k != CENTER:
            n = math.hypot(dy, dx)
            dirs[k] = torch.tensor([dy / n, dx / n], dtype=torch.float64)
    return dirs.to(dtype)


def sample_positions(raw: Tensor, tau: float = 3.0) -> Tensor:
    """Absolute sampling positions for every tap.

    Args:
        raw: [b, 8, h, w] unclamped offset magnitudes, one per surround tap.
        tau: maximum outward displacement in feature-grid units.

    Returns:
        [b, 9, 2, h, w] positions as (y, x); tap ``CENTER`` is exactly the output location.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    b, n, h, w = raw.shape
    if n != 8:
        raise ValueError(f"expected 8 raw offsets per position, got {n}")
    mag = raw.clamp(0.0, tau)
    zero = torch.zeros_like(mag[:, :1])
    mag = torch.cat([mag[:, :CENTER], zero, mag[:, CENTER:]], dim=1)  # [b, 9, h, w]
    dirs = tap_directions(raw.dtype).to(raw.device)  # [9, 2]
    base = torch.tensor(TAPS, dtype=raw.dtype, device=raw.device)  # [9, 2]
    ys = torch.arange(h, dtype=raw.dtype, device=raw.device).view(1, 1, h, 1)
    xs = torch.arange(w, dtype=raw.dtype, device=raw.device).view(1, 1, 1, w)
    py = ys + base[:, 0].view(1, 9, 1, 1) + mag * dirs[:, 0].view(1, 9, 1, 1)
    px = xs + base[:, 1].view(1, 9, 1, 1) + mag * dirs[:, 1].view(1, 9, 1, 1)
    return torch.stack([py, px], dim=2)


def bilinear_gather(x: Tensor, py: Tensor, px: Tensor) -> Tensor:
    """Bilinear samples of ``x`` [b, c, H, W] at float positions ``py``, ``px`` [b, K, h, w].

    Corners outside the map contribute zero. Returns [b, c, K, h * w].
    """
    b, c, H, W = x.shape
    K = py.shape[1]
    flat = x.reshape(b, c, H * W)
    y0 = torch.floor(py).detach()
    x0 = torch.floor(px).detach()
    ly = py - y0
    lx = px - x0
    out = None
    for yy, xx, wgt in (
        (y0, x0, (1 - ly) * (1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx),
        (y0 + 1, x0, ly * (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ):
        valid = (yy >= 0) & (yy <= H - 1) & (xx >= 0) & (xx <= W - 1)
        idx = (yy.clamp(0, H - 1) * W + xx.clamp(0, W - 1)).long().reshape(b, 1, -1)
        vals = flat.gather(2, idx.expand(b, c, idx.shape[-1]))
        term = vals * (wgt * valid).reshape(b, 1, -1)
        out = term if out is None else out + term
    return out.reshape(b, c, K, -1)


def surround_deform_conv2d(x: Tensor, raw: Tensor, weight: Tensor, bias=None, tau: float = 3.0) -> Tensor:
    """Functional form. ``weight`` is [C_out, C_in, 3, 3]; output keeps the input's spatial size."""
    if not torch.isfinite(raw).all():
        raise ValueError("surround offsets contain non-finite values")
    b, c, h, w = x.shape
    if raw.shape[-2:] != (h, w) or raw.shape[0] != b:
        raise ValueError(f"offsets {tuple(raw.shape)} do not match input {tuple(x.shape)}")
    pos = sample_positions(raw, tau)
    cols = bilinear_gather(x, pos[:, :, 0], pos[:, :, 1])  # [b, c, 9, h*w]
    out = torch.matmul(weight.reshape(weight.shape[0], -1), cols.reshape(b, c * 9, h * w))
    if bias is not None:
        out = out + bias.view(1, -1, 1)
    return out.reshape(b, -1, h, w)


def reference_forward(x, raw, weight, bias=None, tau: float = 3.0) -> np.ndarray:
    """Slow float64 loop implementation used as a test oracle for :func:`surround_deform_conv2d`."""
    x = np.asarray(x, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64).reshape(weight.shape[0], weight.shape[1], 9)
    b, c, H, W = x.shape
    out = np.zeros((b, weight.shape[0], H, W))

    def pixel(bi, yy, xx):
        if 0 <= yy < H and 0 <= xx < W:
            return x[bi, :, yy, xx]
        return np.zeros(c)

    for bi in range(b):
        for i in range(H):
            for j in range(W):
                for k, (dy, dx) in enumerate(TAPS):
                    if k == CENTER:
                        qy, qx = float(i), float(j)
                    else:
                        r = raw[bi, SURROUND.index(k), i, j]
                        m = min(max(r, 0.0), tau)
                        norm = math.hypot(dy, dx)
                        qy = i + dy + m * dy / norm
                        qx = j + dx + m * dx / norm
                    fy, fx = math.floor(qy), math.floor(qx)
                    ay, ax = qy - fy, qx - fx
                    sample = (
                        (1 - ay) * (1 - ax) * pixel(bi, fy, fx)
                        + (1 - ay) * ax * pixel(bi, fy, fx + 1)
                        + ay * (1 - ax) * pixel(bi, fy + 1, fx)
                        + ay * ax * pixel(bi, fy + 1, fx + 1)
                    )
                    out[bi, :, i, j] += weight[:, :, k] @ sample
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return out


class SurroundDeformConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, tau: float = 3.0, bias: bool = True):
        super().__init__()
        self.tau = float(tau)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.offset = nn.Conv2d(in_channels, 8, 3, padding=1)
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)

    def forward(self, x: Tensor, return_offsets: bool = False):
        raw = self.offset(x)
        y = surround_deform_conv2d(x, raw, self.weight, self.bias, self.tau)
        if return_offsets:
            return y, raw
        return y

    def dense_equivalent(self, x: Tensor) -> Tensor:
        """The plain 3x3 convolution this layer reduces to when all offsets are <= 0."""
        return F.conv2d(x, self.weight, self.bias, padding=1)

    def extra_repr(self):
        return f"{self.weight.shape[1]}, {self.weight.shape[0]}, tau={self.tau}"
