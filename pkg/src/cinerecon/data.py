"""Synthetic cine phantoms and conversion of sequences to training samples."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import forward_model as fm
from .config import DataConfig


def _soft_ellipse(rr, cc, cy, cx, ry, rx, edge=0.8):
    d = np.sqrt(((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp((d - 1.0) * min(ry, rx) / edge))


def synthetic_cine(n_frames: int = 8, size: int = 64, seed: int = 0) -> np.ndarray:
    """Magnitude cine (T, H, W) in [0, 1]: a torso with a contracting cardiac
    ring, a bright blood pool, and a rigid breathing-like translation."""
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:size, 0:size].astype(float)
    s = size / 64.0
    torso = _soft_ellipse(rr, cc, size / 2, size / 2, 26 * s * rng.uniform(0.9, 1.0),
                          30 * s * rng.uniform(0.9, 1.0))
    texture = np.zeros((size, size))
    for _ in range(6):
        texture += rng.uniform(0.05, 0.15) * _soft_ellipse(
            rr, cc, rng.uniform(0.25, 0.75) * size, rng.uniform(0.25, 0.75) * size,
            rng.uniform(3, 8) * s, rng.uniform(3, 8) * s)
    cy0 = size / 2 + rng.uniform(-4, 4) * s
    cx0 = size / 2 + rng.uniform(-4, 4) * s
    r_dia = rng.uniform(9, 12) * s
    contraction = rng.uniform(0.25, 0.4)
    breath_amp = rng.uniform(1.5, 3.0) * s
    phase0 = rng.uniform(0, 2 * np.pi)
    frames = []
    for t in range(n_frames):
        cyc = 2 * np.pi * t / n_frames
        r = r_dia * (1 - contraction * 0.5 * (1 - np.cos(cyc)))
        dy = breath_amp * np.sin(cyc / 2 + phase0)
        cy, cx = cy0 + dy, cx0 + 0.5 * dy
        wall = _soft_ellipse(rr, cc, cy, cx, r + 3 * s, r * 1.1 + 3 * s)
        pool = _soft_ellipse(rr, cc, cy, cx, r, r * 1.1)
        img = 0.35 * torso + texture * torso + 0.25 * wall + 0.4 * pool
        frames.append(img)
    out = np.stack(frames)
    return out / out.max()


def synthetic_volume(n_slices: int, n_frames: int, size: int, seed: int) -> np.ndarray:
    """(H, W, slices, frames) volume in the layout of the source dataset."""
    stack = np.stack([synthetic_cine(n_frames, size, seed * 1000 + s) for s in range(n_slices)])
    return np.transpose(stack, (2, 3, 0, 1))


def write_synthetic_root(root: str | Path, n_subjects: int = 3, n_slices: int = 2,
                         n_frames: int = 8, size: int = 64, seed: int = 0) -> Path:
    """Mini dataset on disk: ``root/patientNNN/patientNNN.npy`` 4D volumes."""
    root = Path(root)
    for i in range(n_subjects):
        subject = f"patient{i + 1:03d}"
        (root / subject).mkdir(parents=True, exist_ok=True)
        np.save(root / subject / f"{subject}.npy", synthetic_volume(n_slices, n_frames, size, seed + i))
    return root


def synthetic_splits(cfg: DataConfig) -> dict[str, list[fm.ComplexCineSequence]]:
    """One single-slice synthetic subject per sequence, counts from ``synthetic_subjects``."""
    splits = {}
    offset = 0
    for name, count in zip(("train", "val", "test"), cfg.synthetic_subjects):
        seqs = []
        for i in range(count):
            subject = f"{name}{i:03d}"
            mag = synthetic_cine(cfg.synthetic_frames, cfg.synthetic_size,
                                 fm.derive_seed(cfg.split_seed, offset + i))
            phase = fm.synthesize_phase(cfg.synthetic_size, cfg.synthetic_size,
                                        fm.derive_seed(cfg.split_seed, subject, 0))
            seqs.append(fm.attach_phase(mag, phase, subject, 0))
        offset += count
        splits[name] = seqs
    return splits


# --------------------------------------------------------------------------
# Training samples
# --------------------------------------------------------------------------


@dataclass
class Sample:
    """Everything a training or evaluation step needs for one sequence."""

    sequence_id: str
    kspace: torch.Tensor  # (T, H, W) complex, uncentered
    mask: torch.Tensor  # (T, H, W) bool, uncentered
    target: torch.Tensor  # (T, H, W) fully sampled magnitude
    zero_filled: torch.Tensor  # (T, H, W) magnitude


def sequence_masks(seq: fm.ComplexCineSequence, cfg: DataConfig, acceleration: float | None = None):
    acc = cfg.acceleration if acceleration is None else acceleration
    t, h, _ = seq.shape
    seed = fm.derive_seed(cfg.mask_seed, seq.sequence_id)
    if cfg.per_frame_masks:
        return fm.per_frame_masks(h, acc, t, cfg.center_lines, seed)
    return fm.make_vd_mask(h, acc, cfg.center_lines, seed)


def make_sample(seq: fm.ComplexCineSequence, cfg: DataConfig, acceleration: float | None = None,
                dtype: torch.dtype = torch.float32) -> Sample:
    masks = sequence_masks(seq, cfg, acceleration)
    noise = fm.NoiseSpec(cfg.noise_sigma, fm.derive_seed(cfg.mask_seed, seq.sequence_id, "noise"))
    y = fm.undersample(seq, masks, noise)
    zf = fm.zero_filled(y)
    masks = masks if isinstance(masks, list) else [masks] * seq.shape[0]
    mask2d = np.stack([m.broadcast(seq.shape[2]) for m in masks])
    cdtype = torch.complex64 if dtype == torch.float32 else torch.complex128
    return Sample(
        sequence_id=seq.sequence_id,
        kspace=torch.from_numpy(y.frames).to(cdtype),
        mask=torch.from_numpy(mask2d),
        target=torch.from_numpy(seq.magnitude).to(dtype),
        zero_filled=torch.from_numpy(zf.magnitude).to(dtype),
    )


def make_samples(seqs, cfg: DataConfig, acceleration: float | None = None,
                 dtype: torch.dtype = torch.float32) -> list[Sample]:
    return [make_sample(s, cfg, acceleration, dtype) for s in seqs]


def collate(samples: list[Sample]) -> dict[str, torch.Tensor]:
    return {
        "kspace": torch.stack([s.kspace for s in samples]),
        "mask": torch.stack([s.mask for s in samples]),
        "target": torch.stack([s.target for s in samples]),
    }


def load_splits(cfg: DataConfig) -> dict[str, list[fm.ComplexCineSequence]]:
    """Sequences per split from the configured source."""
    if cfg.source == "synthetic":
        return synthetic_splits(cfg)
    return load_prepared(cfg.root)


def load_prepared(root: str | Path) -> dict[str, list[fm.ComplexCineSequence]]:
    import json

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    return {split: [fm.load_sequence(root / e["file"])[0] for e in entries]
            for split, entries in manifest["splits"].items()}
