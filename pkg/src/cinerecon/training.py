"""Optimization loop, evaluation, and run bookkeeping."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .config import TrainConfig
from .data import Sample, collate
from .knet import ifft2c, magnitude
from .params import save_params

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


def loss_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element (mean reduction, no 1/2 factor)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return torch.mean((pred - target) ** 2)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


class ZeroFilledModel(nn.Module):
    """Baseline 'network': magnitude of the inverse DFT of the measured k-space."""

    def forward(self, k_u, mask=None):
        return magnitude(ifft2c(k_u), eps=0.0)


@dataclass
class RunRecord:
    config_hash: str
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_psnr: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_checkpoint: str | None = None

    @property
    def steps(self) -> int:
        return len(self.step_loss)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def first_nonfinite(model: nn.Module, batch: dict[str, torch.Tensor]) -> str:
    """Name the first tensor that goes non-finite: an input, a parameter,
    or the earliest module output in execution order."""
    for key in ("kspace", "target"):
        if not torch.isfinite(batch[key]).all():
            return f"input {key!r}"
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return f"parameter {name!r}"
    found: list[str] = []
    handles = []
    for name, module in model.named_modules():
        def hook(mod, args, out, name=name):
            if found or not isinstance(out, torch.Tensor):
                return
            if not torch.isfinite(out).all():
                found.append(name or "<model>")
        handles.append(module.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(batch["kspace"], batch["mask"])
    finally:
        for h in handles:
            h.remove()
    return f"output of module {found[0]!r}" if found else "loss (all intermediate tensors finite)"


def _predict(model: nn.Module, batch: dict[str, torch.Tensor], mixed_precision: bool) -> torch.Tensor:
    if mixed_precision:
        with torch.autocast("cpu", dtype=torch.bfloat16):
            return model(batch["kspace"], batch["mask"]).float()
    return model(batch["kspace"], batch["mask"])


@torch.no_grad()
def validation_loss(model: nn.Module, samples: list[Sample]) -> tuple[float, float]:
    """Mean loss and mean PSNR over ``samples``."""
    model.eval()
    losses, psnrs = [], []
    for s in samples:
        batch = collate([s])
        pred = model(batch["kspace"], batch["mask"])
        losses.append(float(loss_mse(pred, batch["target"])))
        p = metrics.psnr(s.target.numpy(), pred[0].numpy())
        psnrs.append(100.0 if p == metrics.IDENTICAL else p)
    return float(np.mean(losses)), float(np.mean(psnrs))


def train(model: nn.Module, train_samples: list[Sample], val_samples: list[Sample],
          cfg: TrainConfig, out_dir: str | Path | None = None, config_hash: str = "",
          restore_best: bool = True,
          should_stop: Callable[[RunRecord, nn.Module], bool] | None = None) -> RunRecord:
    """AdamW with plateau LR reduction on validation loss.

    An epoch is ``cfg.epoch_repeats`` shuffled passes over the training
    split; ``cfg.max_steps`` caps the total number of optimizer steps.
    The best-validation weights are written to ``out_dir/best.pt`` (when
    given) and, with ``restore_best``, loaded back into ``model`` at the end.
    ``should_stop`` is polled after every epoch and ends training early
    when it returns True.
    """
    if not train_samples or not val_samples:
        raise ValueError("training needs non-empty train and validation splits")
    seed_everything(cfg.seed, deterministic=not cfg.mixed_precision)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    record = RunRecord(config_hash=config_hash)
    best_state = None
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = [j for _ in range(cfg.epoch_repeats)
                 for j in torch.randperm(len(train_samples), generator=gen).tolist()]
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = collate([train_samples[j] for j in order[i:i + cfg.batch_size]])
            loss = loss_mse(_predict(model, batch, cfg.mixed_precision), batch["target"])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}; first non-finite tensor: {first_nonfinite(model, batch)}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            epoch_losses.append(float(loss.detach()))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val_loss, val_psnr = validation_loss(model, val_samples)
        scheduler.step(val_loss)
        record.epochs.append(epoch)
        record.train_loss.append(float(np.mean(epoch_losses)))
        record.step_loss.extend(epoch_losses)
        record.val_loss.append(val_loss)
        record.val_psnr.append(val_psnr)
        record.learning_rate.append(optimizer.param_groups[0]["lr"])
        record.wall_clock.append(time.perf_counter() - start)
        if val_loss < record.best_val_loss:
            record.best_val_loss = val_loss
            record.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            if out is not None:
                record.best_checkpoint = str(save_params(out / "best.pt", model, config_hash=config_hash,
                                                         epoch=epoch))
        logger.info("epoch %d step %d loss %.5f val %.5f psnr %.2f lr %.2e", epoch, step,
                    record.train_loss[-1], val_loss, val_psnr, record.learning_rate[-1])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        if should_stop is not None and should_stop(record, model):
            break
    if restore_best and best_state is not None:
        model.load_state_dict(best_state)
    if out is not None:
        record.save(out / "run_record.json")
    return record


@dataclass
class EvaluationResult:
    records: list[metrics.MetricsRecord]
    report: metrics.AggregateReport
    baseline_records: list[metrics.MetricsRecord]
    baseline_report: metrics.AggregateReport
    predictions: dict[str, np.ndarray] = field(default_factory=dict)

    def summary(self) -> dict:
        return {"model": self.report.to_dict(), "zero_filled": self.baseline_report.to_dict()}


def _psnr_values(records):
    return [r.psnr_db for r in records if not r.identical]


@torch.no_grad()
def evaluate(model: nn.Module, samples: list[Sample], data_range: float = 1.0,
             keep_predictions: bool = False) -> EvaluationResult:
    """Per-sequence metrics for ``model`` and for the zero-filled baseline on the same masks."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    model.eval()
    records, base = [], []
    preds = {}
    for s in samples:
        pred = model(s.kspace.unsqueeze(0), s.mask.unsqueeze(0))[0].double().numpy()
        ref = s.target.double().numpy()
        records.append(metrics.evaluate_pair(s.sequence_id, ref, pred, data_range, frame_axis=0))
        base.append(metrics.evaluate_pair(s.sequence_id, ref, s.zero_filled.double().numpy(),
                                          data_range, frame_axis=0))
        if keep_predictions:
            preds[s.sequence_id] = pred
    report = metrics.aggregate(records)
    base_report = metrics.aggregate(base)
    a, b = _psnr_values(base), _psnr_values(records)
    if len(a) == len(b) >= 3:
        try:
            report.p_values["psnr_vs_zero_filled"] = metrics.paired_ttest(a, b)[1]
        except metrics.MetricsError:
            pass
    return EvaluationResult(records, report, base, base_report, preds)
