"""k-space reconstruction stage: a 2D U-Net on (real, imag) channels.

Frames are processed independently with shared weights.  k-space is
centered before the network and the sequence is scaled by its peak
magnitude so the network sees values in [-1, 1].
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import KNetConfig
from .ops import pad_to_multiple


def fft2c(image: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2D DFT over the last two axes, uncentered layout."""
    return torch.fft.fft2(image, norm="ortho")


def ifft2c(spectrum: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(spectrum, norm="ortho")


def magnitude(z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """|z| with a finite gradient at zero."""
    return torch.sqrt(z.real ** 2 + z.imag ** 2 + eps)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.InstanceNorm2d(cout),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.InstanceNorm2d(cout),
            nn.LeakyReLU(0.2),
        )


class UNet(nn.Module):
    """Plain U-Net: ``depth`` poolings, channel doubling, skip concatenation."""

    def __init__(self, in_channels: int, out_channels: int, depth: int = 4, base_channels: int = 32):
        super().__init__()
        self.depth = depth
        ch = base_channels
        self.down = nn.ModuleList([ConvBlock(in_channels, ch)])
        for _ in range(depth):
            self.down.append(ConvBlock(ch, ch * 2))
            ch *= 2
        self.up_conv = nn.ModuleList()
        self.up_block = nn.ModuleList()
        for _ in range(depth):
            self.up_conv.append(nn.ConvTranspose2d(ch, ch // 2, kernel_size=2, stride=2))
            self.up_block.append(ConvBlock(ch, ch // 2))
            ch //= 2
        self.head = nn.Conv2d(ch, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, (h, w) = pad_to_multiple(x, 2 ** self.depth, mode="constant")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, block in zip(self.up_conv, self.up_block):
            x = block(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)[..., :h, :w]


class KSpaceUNet(nn.Module):
    """Maps undersampled k-space (N, T, H, W) complex to reconstructed k-space.

    The U-Net predicts a correction that is added to the input spectrum.
    """

    def __init__(self, cfg: KNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or KNetConfig()
        self.unet = UNet(2, 2, self.cfg.depth, self.cfg.base_channels)

    def forward(self, k_u: torch.Tensor) -> torch.Tensor:
        if k_u.dim() != 4 or not k_u.is_complex():
            raise ValueError(f"expected complex (N, T, H, W) k-space, got {tuple(k_u.shape)} {k_u.dtype}")
        n, t, h, w = k_u.shape
        scale = k_u.abs().amax(dim=(1, 2, 3), keepdim=True).clamp_min(1e-12)
        centered = torch.fft.fftshift(k_u / scale, dim=(-2, -1))
        x = torch.view_as_real(centered.reshape(n * t, h, w)).permute(0, 3, 1, 2)
        y = x + self.unet(x)
        y = torch.complex(y[:, 0], y[:, 1]).reshape(n, t, h, w)
        return torch.fft.ifftshift(y, dim=(-2, -1)) * scale


def reconstruct_kspace(k_u: torch.Tensor, net: KSpaceUNet) -> torch.Tensor:
    """Apply the k-space network; accepts a single (T, H, W) sequence or a batch."""
    single = k_u.dim() == 3
    out = net(k_u.unsqueeze(0) if single else k_u)
    return out[0] if single else out


def to_image(k_r: torch.Tensor, k_u: torch.Tensor | None = None, mask: torch.Tensor | None = None,
             data_consistency: bool = False) -> torch.Tensor:
    """Inverse DFT per frame, optionally restoring measured samples first.

    ``mask`` is a boolean tensor broadcastable to ``k_r`` in uncentered
    layout, True where a sample was acquired.
    """
    if data_consistency:
        if k_u is None or mask is None:
            raise ValueError("data consistency needs the measured k-space and its mask")
        k_r = torch.where(mask, k_u, k_r)
    return ifft2c(k_r)
