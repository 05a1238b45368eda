"""``cinerecon`` command line: prepare, train, eval, ablate, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import forward_model as fm
from .config import ConfigError, ExperimentConfig, load_config, toy_config

DATA_ROOT_ENV = "CINERECON_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("cinerecon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_override(text: str) -> tuple[str, object]:
    import yaml

    key, sep, value = text.partition("=")
    if not sep or "." not in key:
        raise UsageError(f"--set expects section.key=value, got {text!r}")
    return key, yaml.safe_load(value)


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else toy_config()
    overrides = dict(_parse_override(s) for s in getattr(args, "set", None) or [])
    return cfg.with_overrides(overrides) if overrides else cfg


# -- commands --------------------------------------------------------------------


def cmd_prepare(args) -> int:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    if not Path(root).is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    spec = fm.SplitSpec(seed=args.split_seed, image_size=(args.image_size, args.image_size)
                        if args.image_size else None)
    splits = fm.ingest_dataset(root, spec)
    out = Path(args.out)
    manifest = {"format_version": fm.FORMAT_VERSION, "data_root": str(Path(root).resolve()),
                "split_seed": args.split_seed, "mask_seed": args.mask_seed,
                "acceleration": args.acceleration, "splits": {}}
    for split, seqs in splits.items():
        (out / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for seq in seqs:
            mask_seed = fm.derive_seed(args.mask_seed, seq.sequence_id)
            mask = fm.make_vd_mask(seq.shape[1], args.acceleration, args.center_lines, mask_seed)
            phase_seed = fm.derive_seed(args.split_seed, seq.subject_id, seq.slice_index)
            rel = f"{split}/{seq.sequence_id}.npz"
            fm.save_sequence(out / rel, seq, mask.lines,
                             {"mask_seed": mask_seed, "phase_seed": phase_seed})
            entries.append({"file": rel, "sequence_id": seq.sequence_id, "subject_id": seq.subject_id,
                            "slice_index": seq.slice_index, "shape": list(seq.shape),
                            "mask_seed": mask_seed, "phase_seed": phase_seed})
        manifest["splits"][split] = entries
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(json.dumps({"out": str(out), "sequences": counts}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_splits, make_samples
    from .model import build_model
    from .training import evaluate, train

    cfg = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    splits = load_splits(cfg.data)
    tr = make_samples(splits["train"], cfg.data)
    va = make_samples(splits["val"], cfg.data)
    model = build_model(cfg, cfg.train.seed)
    record = train(model, tr, va, cfg.train, out, cfg.config_hash())
    result = evaluate(model, va)
    summary = {"out": str(out), "steps": record.steps, "best_epoch": record.best_epoch,
               "best_val_loss": record.best_val_loss, "checkpoint": record.best_checkpoint,
               "val": result.summary()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics
    from .data import load_splits, make_samples
    from .model import CineReconNet
    from .params import load_params
    from .training import ZeroFilledModel, evaluate

    if args.config is None and args.checkpoint:
        sibling = Path(args.checkpoint).parent / "config.yaml"
        args.config = str(sibling) if sibling.exists() else None
    cfg = _experiment(args)
    if args.acceleration is not None:
        cfg = cfg.with_overrides({"data.acceleration": args.acceleration})
    if args.checkpoint:
        model, method = CineReconNet(cfg), "model"
        load_params(args.checkpoint).apply_to(model)
    else:
        model, method = ZeroFilledModel(), "zero_filled"
    samples = make_samples(load_splits(cfg.data)[args.split], cfg.data)
    result = evaluate(model, samples, keep_predictions=args.save_predictions)
    acc = f"{cfg.data.acceleration:g}"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_records_csv(out / "metrics.csv", result.records, {"method": method, "acceleration": acc})
    metrics.write_records_csv(out / "zero_filled.csv", result.baseline_records,
                              {"method": "zero_filled", "acceleration": acc})
    metrics.write_json(out / "metrics.json", result.records, result.report, method=method,
                       split=args.split, acceleration=cfg.data.acceleration,
                       zero_filled=result.baseline_report.to_dict())
    if args.save_predictions:
        recon = out / "reconstructions"
        recon.mkdir(exist_ok=True)
        for s in samples:
            np.savez(recon / f"{s.sequence_id}.npz", reference=s.target.numpy(),
                     zero_filled=s.zero_filled.numpy(),
                     **({method: result.predictions[s.sequence_id]} if method != "zero_filled" else {}))
    print(json.dumps({"method": method, "split": args.split, **result.summary()}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import STUDIES, load_matrix, run_matrix

    if bool(args.matrix) == bool(args.study):
        raise UsageError("pass exactly one of --matrix or --study")
    if args.matrix:
        matrix = load_matrix(args.matrix)
    else:
        base = _experiment(args)
        matrix = STUDIES[args.study](base)
    if args.accelerations:
        matrix.accelerations = tuple(args.accelerations)
    result = run_matrix(matrix, out_root=args.out)
    print(result.format_table())
    failed = [f"{r.cell}@{r.acceleration:g}x" for r in result.rows if r.status != "ok"]
    if failed:
        log.error("failed cells: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plotting

    out = Path(args.out)
    if args.kind == "boxplot":
        rows = plotting.read_results(args.results)
        written = plotting.boxplots(rows, out, dpi=args.dpi)
    else:
        written = [plotting.error_maps_from_file(p, out, frame=args.frame, cmap=args.cmap, dpi=args.dpi)
                   for p in args.results]
    for p in written:
        print(p)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cinerecon", description="Cine MRI reconstruction experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pr = sub.add_parser("prepare", help="ingest a dataset into sequences plus a split manifest")
    pr.add_argument("--data-root", help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--split-seed", type=int, default=0, help="subject permutation and phase seed")
    pr.add_argument("--acceleration", type=float, default=4.0, help="mask acceleration factor")
    pr.add_argument("--mask-seed", type=int, default=0, help="base seed for sampling masks")
    pr.add_argument("--center-lines", type=int, default=None, help="fully sampled center lines")
    pr.add_argument("--image-size", type=int, default=None, help="center crop/pad to a square size")
    pr.set_defaults(func=cmd_prepare)

    def config_flags(q):
        q.add_argument("--config", help="experiment YAML (default: built-in toy config)")
        q.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")

    tr = sub.add_parser("train", help="train the full pipeline")
    config_flags(tr)
    tr.add_argument("--out", required=True, help="run directory for checkpoint and records")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint, or the zero-filled baseline without one")
    config_flags(ev)
    ev.add_argument("--checkpoint", help="parameter file from train (omit for zero-filled)")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--acceleration", type=float, default=None, help="override data.acceleration")
    ev.add_argument("--out", default="eval", help="output directory")
    ev.add_argument("--save-predictions", action="store_true",
                    help="write reference and reconstructions per sequence for error maps")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run an ablation matrix")
    config_flags(ab)
    ab.add_argument("--matrix", help="matrix YAML file")
    ab.add_argument("--study", choices=("components", "propagation", "fusion"),
                    help="built-in study on the --config base")
    ab.add_argument("--accelerations", type=float, nargs="+", help="override matrix accelerations")
    ab.add_argument("--out", default="runs", help="root for runs/<matrix>/<cell>/")
    ab.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="boxplots from metric CSVs or error maps from reconstructions")
    pl.add_argument("--results", nargs="+", required=True,
                    help="metrics CSVs (boxplot) or reconstruction .npz files (errormap)")
    pl.add_argument("--kind", choices=("boxplot", "errormap"), required=True)
    pl.add_argument("--out", required=True, help="figure directory")
    pl.add_argument("--frame", type=int, default=0, help="frame index for error maps")
    pl.add_argument("--cmap", default="inferno", help="error-map colormap")
    pl.add_argument("--dpi", type=int, default=120)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cinerecon {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"cinerecon {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
