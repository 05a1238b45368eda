"""Figure emission: metric boxplots and reconstruction error maps.

Each figure gets a JSON sidecar with the plotted values, so tests can check
what was drawn without reading pixels.  File names depend only on the
inputs (metric, acceleration, sequence, frame).
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import IDENTICAL  # noqa: E402

METRICS = {"psnr_db": "PSNR (dB)", "ssim_pct": "SSIM (%)", "nmse": "NMSE"}


class PlotError(ValueError):
    pass


def read_results(paths) -> list[dict]:
    """Per-sequence rows from one or more metrics CSVs.

    Rows need ``psnr_db``/``ssim_pct``/``nmse``; ``method`` and
    ``acceleration`` default to the file's parent directory name and "?".
    """
    rows = []
    for path in map(Path, paths):
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                row.setdefault("method", path.parent.name)
                row.setdefault("acceleration", "?")
                rows.append(row)
    return rows


def _values(rows, metric):
    out = []
    for r in rows:
        v = r.get(metric)
        if v in (None, "", IDENTICAL):
            continue
        out.append(float(v))
    return out


def boxplots(rows: list[dict], out_dir: str | Path, dpi: int = 120) -> list[Path]:
    """One boxplot per metric per acceleration, one box per method."""
    if not rows:
        raise PlotError("no results to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = list(dict.fromkeys(r["method"] for r in rows))
    accs = list(dict.fromkeys(str(r["acceleration"]) for r in rows))
    groups = defaultdict(list)
    for r in rows:
        groups[(str(r["acceleration"]), r["method"])].append(r)
    written = []
    for acc in accs:
        for metric, label in METRICS.items():
            present = [m for m in methods if groups.get((acc, m))]
            data = [_values(groups[(acc, m)], metric) for m in present]
            fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(present), 3.5))
            ax.boxplot(data, showmeans=True)
            ax.set_xticks(range(1, len(present) + 1), present, rotation=20)
            ax.set_ylabel(label)
            ax.set_title(f"{label} at {acc}x")
            fig.tight_layout()
            path = out_dir / f"boxplot_{metric}_x{acc}.png"
            fig.savefig(path, dpi=dpi)
            plt.close(fig)
            sidecar = {"kind": "boxplot", "metric": metric, "acceleration": acc,
                       "methods": present, "values": dict(zip(present, data)),
                       "medians": {m: float(np.median(v)) if v else None for m, v in zip(present, data)}}
            path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
            written.append(path)
    return written


def error_maps(reference: np.ndarray, reconstructions: dict[str, np.ndarray], out_path: str | Path,
               frame: int = 0, cmap: str = "inferno", dpi: int = 120) -> Path:
    """Side-by-side ``|recon - reference|`` for one frame, on one colour scale.

    Arrays are (T, H, W) or (H, W).  The shared maximum is the largest
    absolute error over all methods in the plotted frame.
    """
    if not reconstructions:
        raise PlotError("no reconstructions to compare")
    ref = np.asarray(reference, dtype=np.float64)
    ref = ref[frame] if ref.ndim == 3 else ref
    errors = {}
    for name, rec in reconstructions.items():
        rec = np.asarray(rec, dtype=np.float64)
        rec = rec[frame] if rec.ndim == 3 else rec
        if rec.shape != ref.shape:
            raise PlotError(f"{name}: shape {rec.shape} does not match reference {ref.shape}")
        errors[name] = np.abs(rec - ref)
    vmax = max(float(e.max()) for e in errors.values())
    fig, axes = plt.subplots(1, len(errors), figsize=(3 * len(errors), 3.2), squeeze=False)
    for ax, (name, err) in zip(axes[0], errors.items()):
        im = ax.imshow(err, cmap=cmap, vmin=0.0, vmax=vmax if vmax > 0 else 1.0)
        ax.set_title(name)
        ax.axis("off")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=dpi)
    plt.close(fig)
    sidecar = {"kind": "errormap", "frame": frame, "vmax": vmax, "methods": list(errors),
               "max_error": {k: float(e.max()) for k, e in errors.items()},
               "mean_error": {k: float(e.mean()) for k, e in errors.items()}}
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return out_path


def error_maps_from_file(path: str | Path, out_dir: str | Path, frame: int = 0, **kw) -> Path:
    """Error maps from an ``.npz`` holding ``reference`` plus one array per method."""
    path = Path(path)
    with np.load(path) as data:
        if "reference" not in data.files:
            raise PlotError(f"{path}: no 'reference' array")
        ref = data["reference"]
        recs = {k: data[k] for k in data.files if k != "reference"}
    return error_maps(ref, recs, Path(out_dir) / f"errormap_{path.stem}_f{frame:02d}.png", frame, **kw)
