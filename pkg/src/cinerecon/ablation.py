"""Declarative ablation matrices: each cell is a config variant trained from scratch.

A matrix file is YAML::

    name: table4
    accelerations: [4, 8]
    base_seed: 0
    base: {train: {max_steps: 200}}     # or base_config: path/to/config.yaml
    cells:
      - {name: FOGP, overrides: {mgda.propagation: FOGP}}
      - {name: SOGP, overrides: {mgda.propagation: SOGP}}
    pairs: [[FOGP, SOGP]]

Results land in ``<out_root>/<matrix>/<cell>/x<acc>/`` plus a matrix-level
CSV and text table.
"""

from __future__ import annotations

import csv
import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import metrics
from .config import ConfigError, ExperimentConfig, MRF_VARIANTS, from_dict, load_config, toy_config
from .data import load_splits, make_samples
from .model import build_model
from .training import evaluate, train

logger = logging.getLogger(__name__)

BYPASSABLE = ("mgda", "mrf")


def bypass_variant(config: ExperimentConfig, *modules: str) -> ExperimentConfig:
    """Copy of ``config`` with the named modules replaced by their bypass."""
    for m in modules:
        if m not in BYPASSABLE:
            raise ConfigError(f"cannot bypass {m!r}; choose from {BYPASSABLE}")
    return config.with_overrides({f"{m}.enabled": False for m in modules})


@dataclass
class Cell:
    name: str
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentMatrix:
    name: str
    base: ExperimentConfig
    cells: list[Cell]
    accelerations: tuple[float, ...] = (4.0, 8.0)
    pairs: list[tuple[str, str]] = field(default_factory=list)
    base_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [c.name for c in self.cells]
        if not names:
            raise ConfigError(f"matrix {self.name!r} has no cells")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigError(f"matrix {self.name!r}: duplicate cell names {dupes}")
        if not self.accelerations or any(a < 1 for a in self.accelerations):
            raise ConfigError(f"matrix {self.name!r}: accelerations must be >= 1")
        for c in self.cells:
            try:
                self.base.with_overrides(c.overrides)
            except (ConfigError, TypeError) as exc:
                raise ConfigError(f"cell {c.name!r}: {exc}") from exc
        for a, b in self.pairs:
            if a not in names or b not in names:
                raise ConfigError(f"pair ({a}, {b}) names a cell not in the matrix")

    def cell_config(self, index: int, acceleration: float) -> ExperimentConfig:
        # every cell trains from the same seed, so cells differ only by their overrides
        cfg = self.base.with_overrides(self.cells[index].overrides)
        return cfg.with_overrides({"data.acceleration": float(acceleration),
                                   "train.seed": self.base_seed})

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "ExperimentMatrix":
        raw = dict(raw)
        unknown = set(raw) - {"name", "base", "base_config", "cells", "accelerations", "pairs", "base_seed"}
        if unknown:
            raise ConfigError(f"unknown matrix keys {sorted(unknown)}")
        if "base_config" in raw:
            path = Path(raw["base_config"])
            base = load_config(path if path.is_absolute() or base_dir is None else base_dir / path)
            if raw.get("base"):
                base = base.with_overrides(_flatten(raw["base"]))
        else:
            base = from_dict(raw.get("base"))
        cells = []
        for entry in raw.get("cells") or []:
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigError(f"matrix cell needs a name: {entry!r}")
            cells.append(Cell(str(entry["name"]), dict(entry.get("overrides") or {})))
        return cls(
            name=str(raw.get("name", "matrix")),
            base=base,
            cells=cells,
            accelerations=tuple(float(a) for a in raw.get("accelerations", (4.0, 8.0))),
            pairs=[tuple(p) for p in raw.get("pairs") or []],
            base_seed=int(raw.get("base_seed", 0)),
        )

    def to_dict(self) -> dict:
        return {"name": self.name, "base": self.base.to_dict(),
                "cells": [{"name": c.name, "overrides": c.overrides} for c in self.cells],
                "accelerations": list(self.accelerations),
                "pairs": [list(p) for p in self.pairs], "base_seed": self.base_seed}


def _flatten(nested: dict) -> dict:
    return {f"{sec}.{k}": v for sec, values in nested.items() for k, v in (values or {}).items()}


def load_matrix(path: str | Path) -> ExperimentMatrix:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentMatrix.from_dict(raw, path.parent)


# -- the three studies --------------------------------------------------------


def components_matrix(base: ExperimentConfig | None = None, **kw) -> ExperimentMatrix:
    """MGDA / MRF toggles: each module alone, then both."""
    return ExperimentMatrix("components", base or toy_config(), [
        Cell("MGDA", {"mrf.enabled": False}),
        Cell("MRF", {"mgda.enabled": False}),
        Cell("MGDA+MRF", {}),
    ], pairs=[("MGDA", "MGDA+MRF"), ("MRF", "MGDA+MRF")], **kw)


def propagation_matrix(base: ExperimentConfig | None = None, **kw) -> ExperimentMatrix:
    return ExperimentMatrix("propagation", base or toy_config(), [
        Cell("FOGP", {"mgda.propagation": "FOGP"}),
        Cell("SOGP", {"mgda.propagation": "SOGP"}),
    ], pairs=[("FOGP", "SOGP")], **kw)


def fusion_matrix(base: ExperimentConfig | None = None, **kw) -> ExperimentMatrix:
    return ExperimentMatrix("fusion", base or toy_config(), [
        Cell("CNN", {"mrf.block_types": list(MRF_VARIANTS["conv"])}),
        Cell("Trans", {"mrf.block_types": list(MRF_VARIANTS["attention"])}),
        Cell("CNN+Trans", {"mrf.block_types": list(MRF_VARIANTS["hybrid"])}),
    ], pairs=[("CNN", "CNN+Trans"), ("Trans", "CNN+Trans")], **kw)


STUDIES = {"components": components_matrix, "propagation": propagation_matrix, "fusion": fusion_matrix}


# -- execution --------------------------------------------------------------------


@dataclass
class CellResult:
    cell: str
    acceleration: float
    status: str  # "ok" or "failed"
    report: metrics.AggregateReport | None = None
    records: list[metrics.MetricsRecord] = field(default_factory=list)
    steps: int = 0
    error: str | None = None

    def psnr_values(self) -> list[float]:
        return [r.psnr_db for r in self.records if not r.identical]


@dataclass
class MatrixResult:
    matrix: ExperimentMatrix
    rows: list[CellResult]
    p_values: dict[tuple[str, str, float], float] = field(default_factory=dict)

    def row(self, cell: str, acceleration: float) -> CellResult:
        for r in self.rows:
            if r.cell == cell and r.acceleration == acceleration:
                return r
        raise KeyError((cell, acceleration))

    def mean_psnr(self, cell: str, acceleration: float) -> float:
        r = self.row(cell, acceleration)
        if r.status != "ok":
            return math.nan
        return r.report.psnr_db.mean

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "acceleration", "status", "psnr_mean", "psnr_std", "ssim_mean",
                        "ssim_std", "nmse_mean", "nmse_std", "n", "steps"])
            for r in self.rows:
                if r.status == "ok":
                    rep = r.report
                    w.writerow([r.cell, r.acceleration, r.status, rep.psnr_db.mean, rep.psnr_db.std,
                                rep.ssim_pct.mean, rep.ssim_pct.std, rep.nmse.mean, rep.nmse.std,
                                rep.count, r.steps])
                else:
                    w.writerow([r.cell, r.acceleration, r.status] + [""] * 7 + [r.steps])
        return path

    def write_pvalues_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_a", "cell_b", "acceleration", "p_psnr"])
            for (a, b, acc), p in self.p_values.items():
                w.writerow([a, b, acc, p])
        return path

    def format_table(self) -> str:
        """Rows are cells; per acceleration the columns are PSNR, SSIM, NMSE."""
        accs = self.matrix.accelerations
        name_w = max(8, *(len(c.name) for c in self.matrix.cells))
        col = 22
        head = " " * name_w + "".join(f"{f'{a:g}x':^{3 * col}}" for a in accs)
        sub = f"{'method':<{name_w}}" + "".join(
            f"{'PSNR (dB)':>{col}}{'SSIM (%)':>{col}}{'NMSE':>{col}}" for _ in accs)
        lines = [head, sub]
        for cell in self.matrix.cells:
            parts = [f"{cell.name:<{name_w}}"]
            for a in accs:
                r = self.row(cell.name, a)
                if r.status != "ok":
                    parts.append(f"{'failed':>{col}}" * 3)
                    continue
                parts.append(f"{r.report.psnr_db.format(2):>{col}}{r.report.ssim_pct.format(2):>{col}}"
                             f"{r.report.nmse.format(4):>{col}}")
            lines.append("".join(parts))
        if self.p_values:
            lines.append("")
            lines.append("paired t-test on per-sequence PSNR:")
            for (a, b, acc), p in self.p_values.items():
                lines.append(f"  {a} vs {b} at {acc:g}x: p = {p:.4g}")
        return "\n".join(lines)


def run_cell(cfg: ExperimentConfig, splits: dict, out_dir: Path | None,
             cell: str = "", acceleration: float = 4.0) -> CellResult:
    """Train one configuration from scratch and evaluate it on the test split."""
    try:
        train_s = make_samples(splits["train"], cfg.data)
        val_s = make_samples(splits["val"], cfg.data)
        test_s = make_samples(splits["test"], cfg.data)
        model = build_model(cfg, cfg.train.seed)
        record = train(model, train_s, val_s, cfg.train, out_dir, cfg.config_hash())
        result = evaluate(model, test_s)
        if out_dir is not None:
            cfg.save(out_dir / "config.yaml")
            metrics.write_records_csv(out_dir / "metrics.csv", result.records,
                                      {"method": cell, "acceleration": f"{acceleration:g}"})
            metrics.write_json(out_dir / "metrics.json", result.records, result.report,
                               zero_filled=result.baseline_report.to_dict())
        return CellResult(cell, acceleration, "ok", result.report, result.records, record.steps)
    except Exception as exc:  # a failed cell must not stop the matrix
        logger.error("cell %s at %gx failed: %s", cell, acceleration, exc)
        if out_dir is not None:
            (out_dir / "error.txt").write_text(traceback.format_exc())
        return CellResult(cell, acceleration, "failed", error=f"{type(exc).__name__}: {exc}")


def run_matrix(matrix: ExperimentMatrix, dataset: dict | None = None,
               out_root: str | Path | None = "runs") -> MatrixResult:
    """Train and evaluate every cell at every acceleration.

    ``dataset`` maps split names to sequence lists; by default it is loaded
    from the base config's data section.  p-values are paired t-tests on
    per-sequence test PSNR for each designated pair (NaN when fewer than
    three test sequences or when a cell failed).
    """
    matrix.validate()
    splits = dataset if dataset is not None else load_splits(matrix.base.data)
    root = Path(out_root) / matrix.name if out_root is not None else None
    rows = []
    for acc in matrix.accelerations:
        for i, cell in enumerate(matrix.cells):
            out_dir = None
            if root is not None:
                out_dir = root / cell.name / f"x{acc:g}"
                out_dir.mkdir(parents=True, exist_ok=True)
            logger.info("matrix %s: cell %s at %gx", matrix.name, cell.name, acc)
            rows.append(run_cell(matrix.cell_config(i, acc), splits, out_dir, cell.name, acc))
    result = MatrixResult(matrix, rows)
    for acc in matrix.accelerations:
        for a, b in matrix.pairs:
            ra, rb = result.row(a, acc), result.row(b, acc)
            p = math.nan
            if ra.status == rb.status == "ok":
                try:
                    p = metrics.paired_ttest(ra.psnr_values(), rb.psnr_values())[1]
                except metrics.MetricsError:
                    pass
            result.p_values[(a, b, acc)] = p
    if root is not None:
        result.write_csv(root / "results.csv")
        result.write_pvalues_csv(root / "p_values.csv")
        (root / "results.txt").write_text(result.format_table() + "\n")
        (root / "matrix.yaml").write_text(yaml.safe_dump(matrix.to_dict(), sort_keys=False))
    return result
