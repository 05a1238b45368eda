"""Image quality metrics and the statistics used to compare methods.

All metrics take real magnitude arrays laid out (H, W, T) by default; pass
``frame_axis`` when frames live elsewhere.  PSNR and NMSE are computed over
the whole sequence at once, SSIM is averaged over frames.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, stats

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Returned by psnr() when the images are identical (MSE == 0).
IDENTICAL = "identical"

CSV_COLUMNS = ("sequence_id", "psnr_db", "ssim_pct", "nmse")


class MetricsError(ValueError):
    pass


def _pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise MetricsError(f"shape mismatch: ref {ref.shape} vs test {test.shape}")
    return ref, test


def mse(ref, test) -> float:
    ref, test = _pair(ref, test)
    return float(np.mean((ref - test) ** 2))


def psnr(ref, test, data_range: float = 1.0) -> float | str:
    """10 * log10(data_range**2 / MSE), or ``IDENTICAL`` when MSE is zero."""
    if data_range <= 0:
        raise MetricsError(f"data_range must be positive, got {data_range}")
    err = mse(ref, test)
    if err == 0:
        return IDENTICAL
    return 10.0 * math.log10(data_range ** 2 / err)


def nmse(ref, test) -> float:
    """||test - ref||^2 / ||ref||^2."""
    ref, test = _pair(ref, test)
    denom = float(np.sum(ref ** 2))
    if denom == 0:
        raise MetricsError("nmse undefined for an all-zero reference")
    return float(np.sum((test - ref) ** 2)) / denom


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    half = len(taps) // 2
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window of a 2D pair."""
    ref, test = _pair(ref, test)
    if ref.ndim != 2:
        raise MetricsError("ssim_map expects 2D images")
    if min(ref.shape) < SSIM_WINDOW:
        raise MetricsError(f"images {ref.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(ref, taps)
    mu_y = _filter_valid(test, taps)
    sxx = _filter_valid(ref * ref, taps) - mu_x ** 2
    syy = _filter_valid(test * test, taps) - mu_y ** 2
    sxy = _filter_valid(ref * test, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(ref, test, data_range: float = 1.0, frame_axis: int = -1) -> float:
    """Mean SSIM in [-1, 1]; multiply by 100 for the percent figure."""
    if data_range <= 0:
        raise MetricsError(f"data_range must be positive, got {data_range}")
    ref, test = _pair(ref, test)
    if ref.ndim == 2:
        return float(ssim_map(ref, test, data_range).mean())
    ref = np.moveaxis(ref, frame_axis, 0)
    test = np.moveaxis(test, frame_axis, 0)
    return float(np.mean([ssim_map(r, t, data_range).mean() for r, t in zip(ref, test)]))


# --------------------------------------------------------------------------
# Records and aggregation
# --------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    sequence_id: str
    psnr_db: float | str
    ssim_pct: float
    nmse: float

    def __post_init__(self):
        if self.nmse < 0:
            raise MetricsError(f"negative nmse {self.nmse}")
        if self.ssim_pct > 100 + 1e-9:
            raise MetricsError(f"ssim {self.ssim_pct}% above 100")

    @property
    def identical(self) -> bool:
        return self.psnr_db == IDENTICAL


def evaluate_pair(sequence_id: str, ref, test, data_range: float = 1.0,
                  frame_axis: int = -1) -> MetricsRecord:
    return MetricsRecord(
        sequence_id=sequence_id,
        psnr_db=psnr(ref, test, data_range),
        ssim_pct=100.0 * ssim(ref, test, data_range, frame_axis),
        nmse=nmse(ref, test),
    )


@dataclass
class MetricSummary:
    mean: float | str
    std: float
    n: int

    def format(self, digits: int = 2) -> str:
        if isinstance(self.mean, str):
            return self.mean
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


@dataclass
class AggregateReport:
    psnr_db: MetricSummary
    ssim_pct: MetricSummary
    nmse: MetricSummary
    count: int
    p_values: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _summarize(values: Sequence[float], single: str) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        if single == "reject":
            raise MetricsError("sample std needs at least two records")
        return MetricSummary(float(arr[0]), 0.0, 1)
    return MetricSummary(float(arr.mean()), float(arr.std(ddof=1)), int(arr.size))


def aggregate(records: Sequence[MetricsRecord], single: str = "zero") -> AggregateReport:
    """Mean and sample standard deviation (n - 1) of each metric.

    ``single`` controls a one-record input: ``"zero"`` reports std 0,
    ``"reject"`` raises.  Records whose PSNR is ``IDENTICAL`` are left out
    of the PSNR summary; if every record is identical the summary mean is
    ``IDENTICAL``.
    """
    if not records:
        raise MetricsError("cannot aggregate an empty record list")
    finite_psnr = [r.psnr_db for r in records if not r.identical]
    if finite_psnr:
        psnr_summary = _summarize(finite_psnr, single)
    else:
        psnr_summary = MetricSummary(IDENTICAL, 0.0, len(records))
    return AggregateReport(
        psnr_db=psnr_summary,
        ssim_pct=_summarize([r.ssim_pct for r in records], single),
        nmse=_summarize([r.nmse for r in records], single),
        count=len(records),
    )


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on ``b - a``.  Returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError(f"paired samples must be equal-length 1D, got {a.shape} and {b.shape}")
    n = a.size
    if n < 3:
        raise MetricsError(f"paired t-test needs at least 3 pairs, got {n}")
    d = b - a
    sd = d.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        raise MetricsError("paired differences have zero variance; t statistic undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return t, p


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def write_records_csv(path: str | Path, records: Iterable[MetricsRecord],
                      extra: dict[str, str] | None = None) -> Path:
    """One row per sequence with the fixed columns, plus optional constant columns."""
    path = Path(path)
    extra = extra or {}
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(extra) + list(CSV_COLUMNS))
        for r in records:
            writer.writerow(list(extra.values()) + [r.sequence_id, r.psnr_db, r.ssim_pct, r.nmse])
    return path


def read_records_csv(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("psnr_db", "ssim_pct", "nmse"):
                if row.get(key) not in (None, IDENTICAL):
                    row[key] = float(row[key])
            rows.append(row)
    return rows


def write_json(path: str | Path, records: Sequence[MetricsRecord],
               report: AggregateReport | None = None, **extra) -> Path:
    path = Path(path)
    payload = {"records": [asdict(r) for r in records], **extra}
    if report is not None:
        payload["aggregate"] = report.to_dict()
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
