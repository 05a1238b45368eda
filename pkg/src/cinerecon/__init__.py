"""Undersampled cardiac cine MRI reconstruction: forward model, networks,
metrics, training and ablation tooling."""

from .config import ConfigError, ExperimentConfig, load_config, toy_config
from .forward_model import (ComplexCineSequence, KSpaceSequence, NoiseSpec, SamplingMask, dft2, idft2,
                            make_vd_mask, undersample, zero_filled)
from .metrics import IDENTICAL, nmse, paired_ttest, psnr, ssim
from .model import CineReconNet, build_model

__version__ = "0.1.0"

__all__ = [
    "ComplexCineSequence", "KSpaceSequence", "NoiseSpec", "SamplingMask", "dft2", "idft2",
    "make_vd_mask", "undersample", "zero_filled", "IDENTICAL", "nmse", "paired_ttest", "psnr",
    "ssim", "CineReconNet", "build_model", "ConfigError", "ExperimentConfig", "load_config",
    "toy_config",
]
