"""Multi-resolution fusion: three parallel branches at scales 1, 1/2, 1/4.

Branches are spawned one per stage by max-pool downsampling and a 1x1
channel lift, exchange information after every stage, and are fused at
full resolution into a single-channel image.  Each branch runs either
residual conv blocks or shifted-window attention blocks.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MrfConfig
from .mgda import ResidualBlock
from .ops import downsample2x, pad_to_multiple, upsample2x


def downsample(x: torch.Tensor) -> torch.Tensor:
    return downsample2x(x)


def upsample(x: torch.Tensor) -> torch.Tensor:
    return upsample2x(x)


# --------------------------------------------------------------------------
# Shifted-window attention
# --------------------------------------------------------------------------


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(N, H, W, C) -> (N * nW, ws*ws, C)"""
    n, h, w, c = x.shape
    x = x.view(n, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, n: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(n, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window, with relative position bias."""

    def __init__(self, dim: int, window_size: int, heads: int):
        super().__init__()
        self.heads = heads
        self.window_size = window_size
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        ws = window_size
        self.rel_bias = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * ws - 1) + rel[..., 1], persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.rel_bias[self.rel_index.reshape(-1)].view(n, n, -1).permute(2, 0, 1)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(b, self.heads, n, n)
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


def shifted_window_mask(h: int, w: int, ws: int, shift: int, like: torch.Tensor) -> torch.Tensor:
    """Additive mask that stops attention across the wrap-around seam of a cyclic shift."""
    region = torch.zeros(1, h, w, 1, device=like.device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            region[:, hs, wsl, :] = cnt
            cnt += 1
    ids = window_partition(region, ws).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff, dtype=like.dtype).masked_fill(diff != 0, -100.0)


class SwinLayer(nn.Module):
    def __init__(self, dim: int, window_size: int, heads: int, shift: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, H, W, C)
        n, h, w, c = x.shape
        ws = self.window_size
        shift = self.shift if min(h, w) > ws else 0
        y = self.norm1(x)
        mask = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = shifted_window_mask(h, w, ws, shift, y)
        y = self.attn(window_partition(y, ws), mask)
        y = window_reverse(y, ws, n, h, w)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class AttentionBlock(nn.Module):
    """Regular-window then shifted-window attention layer, (N, C, H, W) in and out."""

    def __init__(self, dim: int, window_size: int = 8, heads: int = 2, mlp_ratio: float = 2.0):
        super().__init__()
        self.window_size = window_size
        self.layers = nn.ModuleList([
            SwinLayer(dim, window_size, heads, 0, mlp_ratio),
            SwinLayer(dim, window_size, heads, window_size // 2, mlp_ratio),
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.window_size or w % self.window_size:
            raise ValueError(f"feature size {h}x{w} not divisible by window {self.window_size}")
        y = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            y = layer(y)
        return y.permute(0, 3, 1, 2)


def attention_block(x: torch.Tensor, block: AttentionBlock) -> torch.Tensor:
    return block(x)


# --------------------------------------------------------------------------
# Fusion network
# --------------------------------------------------------------------------


def _resample(x: torch.Tensor, levels: int) -> torch.Tensor:
    """Move ``x`` by ``levels`` scales: positive = coarser, negative = finer."""
    for _ in range(abs(levels)):
        x = downsample(x) if levels > 0 else upsample(x)
    return x


class MRF(nn.Module):
    """Aligned features (N, C_in, H, W) -> residual magnitude image (N, 1, H, W)."""

    def __init__(self, in_channels: int, cfg: MrfConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MrfConfig()
        c = cfg.channels
        self.widths = (c, 2 * c, 4 * c)
        self.stem = nn.Conv2d(in_channels, c, 3, padding=1)
        self.stages = nn.ModuleList()
        self.spawn = nn.ModuleList()
        self.exchange = nn.ModuleList()
        for s in range(cfg.stages):
            active = min(s + 1, 3)
            self.stages.append(nn.ModuleList(
                nn.Sequential(*[self._block(b) for _ in range(cfg.blocks_per_stage)])
                for b in range(active)))
            self.exchange.append(nn.ModuleDict({
                f"{k}to{j}": nn.Conv2d(self.widths[k], self.widths[j], 1)
                for j in range(active) for k in range(active) if k != j}))
            if active < 3 and s + 1 < cfg.stages:
                self.spawn.append(nn.Conv2d(self.widths[active - 1], self.widths[active], 1))
        self.n_branches = min(cfg.stages, 3)
        self.to_full = nn.ModuleList(nn.Conv2d(self.widths[b], c, 1) for b in range(1, self.n_branches))
        self.head = nn.Sequential(
            nn.Conv2d(c * self.n_branches, c, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(c, 1, 3, padding=1))

    def _block(self, branch: int) -> nn.Module:
        width = self.widths[branch]
        if self.cfg.block_types[branch] == "attention":
            return AttentionBlock(width, self.cfg.window_size, self.cfg.heads[branch], self.cfg.mlp_ratio)
        return ResidualBlock(width)

    @property
    def pad_multiple(self) -> int:
        return 4 * self.cfg.window_size

    def forward(self, f_a: torch.Tensor) -> torch.Tensor:
        x, (h, w) = pad_to_multiple(f_a, self.pad_multiple, mode="reflect")
        branches = [self.stem(x)]
        for s, blocks in enumerate(self.stages):
            branches = [blk(b) for blk, b in zip(blocks, branches)]
            ex = self.exchange[s]
            if len(branches) > 1:
                branches = [
                    b + sum(ex[f"{k}to{j}"](_resample(branches[k], j - k))
                            for k in range(len(branches)) if k != j)
                    for j, b in enumerate(branches)]
            if len(branches) < 3 and s + 1 < len(self.stages):
                branches.append(self.spawn[len(branches) - 1](downsample(branches[-1])))
        full = [branches[0]] + [proj(_resample(b, -(i + 1)))
                                for i, (proj, b) in enumerate(zip(self.to_full, branches[1:]))]
        out = self.head(torch.cat(full, dim=1))
        return out[..., :h, :w]


def mrf_forward(f_a: torch.Tensor, module: MRF) -> torch.Tensor:
    """Run fusion on a single (C, H, W) feature map or a batch; returns (H, W) / (N, H, W)."""
    single = f_a.dim() == 3
    out = module(f_a.unsqueeze(0) if single else f_a)[:, 0]
    return out[0] if single else out
