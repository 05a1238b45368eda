"""End-to-end reconstruction network: k-space U-Net -> iDFT -> MGDA -> MRF."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ExperimentConfig
from .knet import KSpaceUNet, magnitude, to_image
from .mgda import MGDA
from .mrf import MRF


class ConvHead(nn.Sequential):
    """Three-layer conv head used in place of the fusion module when it is disabled."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__(
            nn.Conv2d(in_channels, channels, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(channels, 1, 3, padding=1))


def _last_conv(module: nn.Module) -> nn.Conv2d:
    return [m for m in module.modules() if isinstance(m, nn.Conv2d)][-1]


class CineReconNet(nn.Module):
    """Undersampled k-space (N, T, H, W) complex -> magnitude frames (N, T, H, W).

    The fusion output is added to the magnitude of the k-space stage's
    image, so the network body learns a correction.  Both residual heads
    start at zero: an untrained network returns the zero-filled magnitude.
    """

    def __init__(self, cfg: ExperimentConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ExperimentConfig()
        self.knet = KSpaceUNet(cfg.knet)
        self.mgda = MGDA(cfg.mgda)
        if cfg.mrf.enabled:
            self.fusion = MRF(cfg.mgda.channels, cfg.mrf)
        else:
            self.fusion = ConvHead(cfg.mgda.channels, cfg.mrf.channels)
        for last in (self.knet.unet.head, _last_conv(self.fusion)):
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)

    def stage_outputs(self, k_u: torch.Tensor, mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """All intermediate tensors, in execution order."""
        k_r = self.knet(k_u)
        image = to_image(k_r, k_u, mask, self.cfg.knet.use_data_consistency)
        mag = magnitude(image)
        feats = self.mgda(mag)
        n, t, c, h, w = feats.shape
        correction = self.fusion(feats.reshape(n * t, c, h, w)).view(n, t, h, w)
        return {"k_r": k_r, "image": image, "magnitude": mag, "features": feats,
                "correction": correction, "output": mag + correction}

    def forward(self, k_u: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.stage_outputs(k_u, mask)["output"]


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> CineReconNet:
    if seed is not None:
        torch.manual_seed(seed)
    return CineReconNet(cfg)
