"""Cartesian single-coil acquisition model for cine MRI.

Covers the orthonormal 2D DFT pair, variable-density line masks, synthetic
phase maps, retrospective undersampling with complex Gaussian noise,
zero-filled reconstruction, dataset ingestion and the on-disk sequence
format.

k-space arrays produced here are *uncentered* (zero frequency at index 0,
numpy FFT order).  Sampling masks are stored in *centered* order (zero
frequency line at index ``H // 2``) and shifted when applied.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_SMOOTHNESS_BOUND = np.pi / 8

# Sinusoid parameter ranges for synthetic phase.
PHASE_AMPLITUDE_RANGE = (np.pi / 4, np.pi)
PHASE_FREQUENCY_RANGE = (0.0, 3.0)


class ForwardModelError(ValueError):
    """Invalid input to the acquisition model."""


# --------------------------------------------------------------------------
# Data containers
# --------------------------------------------------------------------------


@dataclass
class ComplexCineSequence:
    """T complex frames of one cine slice, shape (T, H, W)."""

    frames: np.ndarray
    subject_id: str = "anon"
    slice_index: int = 0
    spacing_meta: dict | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ForwardModelError(f"frames must be (T, H, W), got shape {frames.shape}")
        if not np.iscomplexobj(frames):
            frames = frames.astype(np.complex128)
        t, h, w = frames.shape
        if t < 2 or h < 16 or w < 16:
            raise ForwardModelError(f"need T >= 2 and H, W >= 16, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ForwardModelError("frames contain non-finite values")
        self.frames = frames

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def sequence_id(self) -> str:
        return f"{self.subject_id}_s{self.slice_index:02d}"


@dataclass
class KSpaceSequence:
    """T complex spectra, shape (T, H, W).

    ``mask`` holds the line masks in centered order, one row per frame, when
    the data came from :func:`undersample`.
    """

    frames: np.ndarray
    centered: bool = False
    mask: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape


@dataclass(frozen=True)
class SamplingMask:
    lines: np.ndarray
    acceleration: float
    center_lines: int
    seed: int

    @property
    def num_sampled(self) -> int:
        return int(self.lines.sum())

    def broadcast(self, width: int, centered: bool = False) -> np.ndarray:
        """(H, W) boolean mask in the requested k-space layout."""
        lines = self.lines.astype(bool)
        if not centered:
            lines = np.fft.ifftshift(lines)
        return np.repeat(lines[:, None], width, axis=1)


@dataclass(frozen=True)
class PhaseMap:
    values: np.ndarray
    generator_params: dict = field(default_factory=dict)

    def max_gradient(self) -> float:
        """Largest absolute forward difference, measured on the wrapped circle."""
        grads = []
        for axis in (0, 1):
            d = np.diff(self.values, axis=axis)
            grads.append(np.abs(np.angle(np.exp(1j * d))).max(initial=0.0))
        return float(max(grads))


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ForwardModelError(f"noise sigma must be >= 0, got {self.sigma}")


# --------------------------------------------------------------------------
# Fourier transforms
# --------------------------------------------------------------------------


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise ForwardModelError(f"{name} has non-finite entry at index {tuple(int(i) for i in bad)}")


def dft2(image: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT over the last two axes (uncentered layout)."""
    image = np.asarray(image)
    _check_finite(image, "dft2 input")
    return np.fft.fft2(image, norm="ortho")


def idft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2`."""
    spectrum = np.asarray(spectrum)
    _check_finite(spectrum, "idft2 input")
    return np.fft.ifft2(spectrum, norm="ortho")


# --------------------------------------------------------------------------
# Masks, phase, noise
# --------------------------------------------------------------------------


def default_center_lines(height: int, acceleration: float) -> int:
    """Autocalibration width: 16 lines at 4x and 8 at 8x for H=256, scaled with H."""
    return max(1, int(round(height / (4.0 * acceleration))))


def make_vd_mask(height: int, acceleration: float, center_lines: int | None = None,
                 seed: int = 0) -> SamplingMask:
    """Variable-density 1D phase-encode mask.

    The central block is always acquired.  The remaining lines are drawn
    without replacement with probability proportional to
    ``exp(-d**2 / (2 * (H / 6)**2))``, ``d`` being the distance to the
    zero-frequency line, until ``round(H / acceleration)`` lines are set.
    """
    if acceleration < 1:
        raise ForwardModelError(f"acceleration must be >= 1, got {acceleration}")
    if center_lines is None:
        center_lines = default_center_lines(height, acceleration)
    if not 0 <= center_lines <= height:
        raise ForwardModelError(f"center_lines={center_lines} outside [0, {height}]")

    n_total = max(int(round(height / acceleration)), center_lines)
    center = height // 2
    start = center - center_lines // 2
    lines = np.zeros(height, dtype=np.uint8)
    lines[start:start + center_lines] = 1

    remaining = n_total - center_lines
    if remaining > 0:
        candidates = np.flatnonzero(lines == 0)
        d = candidates - center
        weights = np.exp(-d.astype(float) ** 2 / (2.0 * (height / 6.0) ** 2))
        rng = np.random.default_rng(seed)
        picked = rng.choice(candidates, size=remaining, replace=False, p=weights / weights.sum())
        lines[picked] = 1
    return SamplingMask(lines=lines, acceleration=float(acceleration),
                        center_lines=int(center_lines), seed=int(seed))


def sinusoid_phase(height: int, width: int, amplitude: float, freq_rows: float,
                   freq_cols: float, offset: float) -> np.ndarray:
    """a * sin(2*pi*(f_r*r/H + f_c*c/W) + phi), wrapped to [-pi, pi)."""
    r = np.arange(height)[:, None] / height
    c = np.arange(width)[None, :] / width
    raw = amplitude * np.sin(2 * np.pi * (freq_rows * r + freq_cols * c) + offset)
    return (raw + np.pi) % (2 * np.pi) - np.pi


def synthesize_phase(height: int, width: int, seed: int,
                     smoothness_bound: float = DEFAULT_SMOOTHNESS_BOUND) -> PhaseMap:
    """Random smooth sinusoidal phase map, deterministic in ``seed``.

    Frequencies are drawn from [0, 3] cycles but capped per axis at
    ``smoothness_bound * N / (2 * pi * a)`` so that the per-pixel phase
    step never exceeds ``smoothness_bound`` on small grids.
    """
    if height < 16 or width < 16:
        raise ForwardModelError(f"phase map must be at least 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    amplitude = float(rng.uniform(*PHASE_AMPLITUDE_RANGE))
    lo, hi = PHASE_FREQUENCY_RANGE
    # the step along an axis is at most a*2*pi*f/N; keep 5% headroom
    cap_r = min(hi, 0.95 * smoothness_bound * height / (2 * np.pi * amplitude))
    cap_c = min(hi, 0.95 * smoothness_bound * width / (2 * np.pi * amplitude))
    params = {
        "amplitude": amplitude,
        "freq_rows": float(lo + rng.uniform() * (cap_r - lo)),
        "freq_cols": float(lo + rng.uniform() * (cap_c - lo)),
        "offset": float(rng.uniform(0.0, 2 * np.pi)),
    }
    return PhaseMap(values=sinusoid_phase(height, width, **params), generator_params=params)


def normalize_magnitude(magnitude: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(magnitude)))
    if peak == 0:
        raise ForwardModelError("cannot normalize an all-zero sequence")
    return np.abs(magnitude) / peak


def attach_phase(magnitude: np.ndarray, phase: PhaseMap | None, subject_id: str = "anon",
                 slice_index: int = 0, spacing_meta: dict | None = None) -> ComplexCineSequence:
    """Max-normalize a (T, H, W) magnitude stack and give it a complex phase."""
    mag = normalize_magnitude(np.asarray(magnitude, dtype=float))
    frames = mag.astype(np.complex128)
    if phase is not None:
        frames = frames * np.exp(1j * phase.values)[None]
    return ComplexCineSequence(frames, subject_id=subject_id, slice_index=slice_index,
                               spacing_meta=spacing_meta)


def _frame_masks(mask: SamplingMask | Sequence[SamplingMask], n_frames: int) -> list[SamplingMask]:
    if isinstance(mask, SamplingMask):
        return [mask] * n_frames
    masks = list(mask)
    if len(masks) != n_frames:
        raise ForwardModelError(f"got {len(masks)} frame masks for {n_frames} frames")
    return masks


def per_frame_masks(height: int, acceleration: float, n_frames: int,
                    center_lines: int | None = None, seed: int = 0) -> list[SamplingMask]:
    """Independent masks per frame, seeded ``seed + t``."""
    return [make_vd_mask(height, acceleration, center_lines, seed + t) for t in range(n_frames)]


def undersample(x: ComplexCineSequence, mask: SamplingMask | Sequence[SamplingMask],
                noise: NoiseSpec = NoiseSpec()) -> KSpaceSequence:
    """y = M * F(x) + noise, frame by frame.

    ``mask`` is either one mask shared by all frames or one per frame.
    Noise is complex Gaussian with total standard deviation ``sigma`` and is
    added to acquired entries only; unacquired entries are exactly zero.
    """
    t, h, w = x.shape
    masks = _frame_masks(mask, t)
    for m in masks:
        if m.lines.shape[0] != h:
            raise ForwardModelError(
                f"mask length {m.lines.shape[0]} != phase-encode dimension {h}")
    spectra = dft2(x.frames)
    m2d = np.stack([m.broadcast(w) for m in masks])
    y = np.where(m2d, spectra, 0)
    if noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        eps = rng.standard_normal((2, t, h, w)) * (noise.sigma / np.sqrt(2))
        y = y + np.where(m2d, eps[0] + 1j * eps[1], 0)
    lines = np.stack([m.lines for m in masks]).astype(np.uint8)
    return KSpaceSequence(frames=y, centered=False, mask=lines)


def zero_filled(y: KSpaceSequence) -> ComplexCineSequence:
    frames = y.frames
    if y.centered:
        frames = np.fft.ifftshift(frames, axes=(-2, -1))
    return ComplexCineSequence(idft2(frames))


# --------------------------------------------------------------------------
# Dataset ingestion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Subject-level split.

    ``counts`` gives explicit (train, val, test) subject counts; when the
    dataset holds fewer subjects than requested, counts are scaled
    proportionally with at least one subject per split.
    """

    counts: tuple[int, int, int] = (100, 20, 30)
    seed: int = 0
    image_size: tuple[int, int] | None = None

    names = ("train", "val", "test")

    def allocate(self, n_subjects: int) -> tuple[int, int, int]:
        if n_subjects >= sum(self.counts):
            return self.counts
        if n_subjects < 3:
            raise ForwardModelError(f"need at least 3 subjects to split, found {n_subjects}")
        total = sum(self.counts)
        alloc = [max(1, int(round(c * n_subjects / total))) for c in self.counts]
        while sum(alloc) > n_subjects:
            alloc[int(np.argmax(alloc))] -= 1
        while sum(alloc) < n_subjects:
            alloc[0] += 1
        return tuple(alloc)


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def derive_seed(*parts: int | str) -> int:
    """Deterministic 32-bit seed from mixed int/str parts."""
    ints = [p if isinstance(p, int) else stable_hash(p) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _find_volumes(root: Path) -> dict[str, Path]:
    """Map subject id -> 4D volume file.

    Recognises ACDC's ``patientXXX/patientXXX_4d.nii.gz`` as well as plain
    ``<subject>.npy`` arrays.
    """
    found: dict[str, Path] = {}
    for path in sorted(root.rglob("*_4d.nii*")):
        found[path.name.split("_4d")[0]] = path
    for path in sorted(root.rglob("*.npy")):
        found.setdefault(path.stem, path)
    return found


def _read_volume(path: Path) -> tuple[np.ndarray, dict | None]:
    if path.suffix == ".npy":
        return np.load(path), None
    import nibabel as nib

    img = nib.load(str(path))
    zooms = img.header.get_zooms()
    return np.asarray(img.dataobj, dtype=np.float64), {"pixel_size": [float(z) for z in zooms[:2]]}


def center_crop_or_pad(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Crop or zero-pad the last two axes symmetrically to ``size``."""
    out = frames
    for axis, target in zip((-2, -1), size):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif n < target:
            before = (target - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[axis] = (before, target - n - before)
            out = np.pad(out, pad)
    return out


def sequences_from_volume(volume: np.ndarray, subject_id: str, split_seed: int,
                          image_size: tuple[int, int] | None = None,
                          spacing_meta: dict | None = None) -> list[ComplexCineSequence]:
    """Split an (H, W, slices, frames) volume into one sequence per slice."""
    if volume.ndim != 4:
        raise ForwardModelError(f"expected a 4D (H, W, slices, frames) volume, got {volume.shape}")
    seqs = []
    for s in range(volume.shape[2]):
        mag = np.transpose(volume[:, :, s, :], (2, 0, 1))
        if image_size is not None:
            mag = center_crop_or_pad(mag, image_size)
        if not np.any(mag):
            logger.warning("skipping empty slice %d of %s", s, subject_id)
            continue
        _, h, w = mag.shape
        phase = synthesize_phase(h, w, derive_seed(split_seed, subject_id, s))
        seqs.append(attach_phase(mag, phase, subject_id, s, spacing_meta))
    return seqs


def ingest_dataset(root_path: str | Path, split_spec: SplitSpec = SplitSpec()
                   ) -> dict[str, list[ComplexCineSequence]]:
    """Read 4D magnitude volumes and return ``{"train": [...], "val": [...], "test": [...]}``.

    Subjects are shuffled with ``split_spec.seed`` before assignment, so
    splits are subject-disjoint and reproducible.  Unreadable files are
    skipped with a warning.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ForwardModelError(f"data root {root} is not a directory")
    volumes = _find_volumes(root)
    loaded: dict[str, list[ComplexCineSequence]] = {}
    for subject, path in volumes.items():
        try:
            vol, meta = _read_volume(path)
            seqs = sequences_from_volume(vol, subject, split_spec.seed,
                                         split_spec.image_size, meta)
        except Exception as exc:  # corrupt or unexpected file
            logger.warning("skipping %s: %s", path, exc)
            continue
        if seqs:
            loaded[subject] = seqs

    subjects = sorted(loaded)
    n_train, n_val, n_test = split_spec.allocate(len(subjects))
    order = np.random.default_rng(split_spec.seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val),
              "test": (n_train + n_val, n_train + n_val + n_test)}
    splits = {}
    for name, (a, b) in bounds.items():
        chosen = sorted(shuffled[a:b])
        if not chosen:
            raise ForwardModelError(f"split {name!r} is empty")
        splits[name] = [seq for subj in chosen for seq in loaded[subj]]
    return splits


# --------------------------------------------------------------------------
# Internal sequence file format
# --------------------------------------------------------------------------


def save_sequence(path: str | Path, seq: ComplexCineSequence, mask: np.ndarray | None = None,
                  seeds: dict[str, int] | None = None) -> Path:
    """Write one sequence as an uncompressed ``.npz``.

    Keys: ``format_version``, ``frames`` (complex, T x H x W), ``mask``
    (uint8 line masks, possibly empty), ``seed_names`` / ``seed_values``,
    ``subject_id``, ``slice_index``.
    """
    path = Path(path)
    seeds = seeds or {}
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        format_version=np.int64(FORMAT_VERSION),
        frames=seq.frames,
        mask=np.zeros((0,), np.uint8) if mask is None else np.asarray(mask, np.uint8),
        seed_names=np.array(list(seeds.keys()), dtype=str),
        seed_values=np.array(list(seeds.values()), dtype=np.int64),
        subject_id=np.array(seq.subject_id),
        slice_index=np.int64(seq.slice_index),
    )
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_sequence(path: str | Path) -> tuple[ComplexCineSequence, np.ndarray | None, dict[str, int]]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ForwardModelError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        seq = ComplexCineSequence(data["frames"], subject_id=str(data["subject_id"]),
                                  slice_index=int(data["slice_index"]))
        mask = data["mask"] if data["mask"].size else None
        seeds = dict(zip(data["seed_names"].tolist(), data["seed_values"].tolist()))
    return seq, mask, seeds
