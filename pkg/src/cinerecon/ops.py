"""Differentiable sampling primitives shared by the alignment and fusion modules.

Conventions:

* flows and offsets are in pixels, channel 0 horizontal (x, columns),
  channel 1 vertical (y, rows);
* warping is backward: ``out(r, c) = in(r + flow_y, c + flow_x)``;
* samples falling outside the image read zeros.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def bilinear_sample(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (N, C, H, W) at points ``px``/``py`` of shape (N, P).

    Returns (N, C, P).  At integer coordinates the result is the stored
    value exactly, because the three off-corner weights are exactly zero.
    """
    n, c, h, w = x.shape
    # zero border: one pixel before, two after, so clamped corners read zeros
    padded = F.pad(x, (1, 2, 1, 2)).reshape(n, c, (h + 3) * (w + 3))
    px = px.clamp(-1, w)
    py = py.clamp(-1, h)
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    base = (y0.long() + 1) * (w + 3) + (x0.long() + 1)
    index = torch.cat([base, base + 1, base + (w + 3), base + (w + 4)], dim=1)
    vals = torch.gather(padded, 2, index.unsqueeze(1).expand(n, c, index.shape[-1]))
    v00, v01, v10, v11 = vals.chunk(4, dim=2)
    gx = 1 - fx
    gy = 1 - fy
    return ((v00 * (gy * gx).unsqueeze(1) + v01 * (gy * fx).unsqueeze(1))
            + v10 * (fy * gx).unsqueeze(1)) + v11 * (fy * fx).unsqueeze(1)


def pixel_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(h, device=like.device, dtype=like.dtype),
                            torch.arange(w, device=like.device, dtype=like.dtype), indexing="ij")
    return xs, ys


def warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``x`` (N, C, H, W) by ``flow`` (N, 2, H, W)."""
    n, _, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match input {tuple(x.shape)}")
    gx, gy = pixel_grid(h, w, flow)
    px = (gx + flow[:, 0]).reshape(n, -1)
    py = (gy + flow[:, 1]).reshape(n, -1)
    return bilinear_sample(x, px, py).reshape(x.shape)


def compose_flows(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Flow equivalent to warping by ``second`` after ``first``.

    If ``first`` maps frame i to i-1 and ``second`` maps i-1 to i-2, the
    result maps i to i-2.
    """
    return first + warp(second, first)


def soft_clamp(x: torch.Tensor, bound: float) -> torch.Tensor:
    """``bound * tanh(x / bound)``: smooth, identity near zero, never exceeds ``bound``."""
    return bound * torch.tanh(x / bound)


def modulated_deform_conv2d(x: torch.Tensor, offset: torch.Tensor, mask: torch.Tensor,
                            weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Modulated deformable convolution, stride 1, 'same' padding.

    Args:
        x: (N, C_in, H, W) input.
        offset: (N, G * K*K * 2, H, W), read as (G, K*K, [dx, dy]) per pixel;
            taps enumerate the kernel row-major.
        mask: (N, G * K*K, H, W) modulation, applied to each sampled tap.
        weight: (C_out, C_in, K, K).
        bias: optional (C_out,).

    Each of the G offset groups owns a contiguous block of C_in / G input
    channels.  With zero offsets and unit mask this is ``F.conv2d`` with
    ``padding=K // 2``.
    """
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ValueError(f"weight expects {cin_w} input channels, got {cin}")
    kk = kh * kw
    groups = offset.shape[1] // (2 * kk)
    if groups * 2 * kk != offset.shape[1] or cin % groups:
        raise ValueError(f"offset channels {offset.shape[1]} incompatible with "
                         f"kernel {kh}x{kw} and {cin} input channels")
    if mask.shape[1] != groups * kk:
        raise ValueError(f"mask has {mask.shape[1]} channels, expected {groups * kk}")
    cg = cin // groups

    off = offset.view(n, groups, kk, 2, h, w)
    ky, kx = torch.meshgrid(torch.arange(kh, device=x.device, dtype=x.dtype) - kh // 2,
                            torch.arange(kw, device=x.device, dtype=x.dtype) - kw // 2,
                            indexing="ij")
    gx, gy = pixel_grid(h, w, x)
    px = gx.view(1, 1, 1, h, w) + kx.reshape(1, 1, kk, 1, 1) + off[:, :, :, 0]
    py = gy.view(1, 1, 1, h, w) + ky.reshape(1, 1, kk, 1, 1) + off[:, :, :, 1]

    # grid_sample expects [-1, 1] coordinates (align_corners=True: -1 -> pixel 0)
    grid = torch.stack([px * (2.0 / max(w - 1, 1)) - 1.0, py * (2.0 / max(h - 1, 1)) - 1.0], dim=-1)
    cols = F.grid_sample(x.reshape(n * groups, cg, h, w), grid.reshape(n * groups, kk * h, w, 2),
                         mode="bilinear", padding_mode="zeros", align_corners=True)
    cols = cols.view(n, groups, cg, kk, h * w) * mask.view(n, groups, 1, kk, h * w)
    out = torch.matmul(weight.reshape(cout, cin * kk), cols.reshape(n, cin * kk, h * w))
    if bias is not None:
        out = out + bias.view(1, cout, 1)
    return out.view(n, cout, h, w)


def downsample2x(x: torch.Tensor) -> torch.Tensor:
    """2x2 max-pooling, stride 2.  Odd sizes are first replicate-padded."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    return F.max_pool2d(x, kernel_size=2, stride=2)


def _upsample_axis(x: torch.Tensor, dim: int) -> torch.Tensor:
    # half-pixel centres: output 2k sits at k - 1/4, output 2k+1 at k + 1/4
    n = x.shape[dim]
    prev = torch.cat([x.narrow(dim, 0, 1), x.narrow(dim, 0, n - 1)], dim=dim)
    nxt = torch.cat([x.narrow(dim, 1, n - 1), x.narrow(dim, n - 1, 1)], dim=dim)
    even = torch.lerp(x, prev, 0.25)
    odd = torch.lerp(x, nxt, 0.25)
    out = torch.stack([even, odd], dim=dim + 1)
    shape = list(x.shape)
    shape[dim] = 2 * n
    return out.reshape(shape)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """2x bilinear upsampling, ``align_corners=False`` convention, edges clamped.

    Matches ``F.interpolate(..., scale_factor=2, mode="bilinear")`` to
    rounding, and written as lerps so constants are reproduced bit-exactly.
    """
    return _upsample_axis(_upsample_axis(x, x.dim() - 2), x.dim() - 1)


def pad_to_multiple(x: torch.Tensor, multiple: int, mode: str = "reflect"
                    ) -> tuple[torch.Tensor, tuple[int, int]]:
    """Pad the bottom/right of ``x`` so H and W are multiples; returns the original size."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        if mode == "reflect" and (ph >= h or pw >= w):
            mode = "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)
