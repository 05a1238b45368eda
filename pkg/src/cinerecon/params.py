"""Checkpoint files: named tensors plus a format tag and version."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

FORMAT_TAG = "cinerecon-params"
VERSION = 1


class ParameterStoreError(RuntimeError):
    pass


@dataclass
class ParameterStore:
    tensors: dict[str, torch.Tensor]
    version: int = VERSION
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: nn.Module, **meta) -> "ParameterStore":
        return cls({k: v.detach().clone() for k, v in module.state_dict().items()}, VERSION, meta)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    def apply_to(self, module: nn.Module) -> nn.Module:
        """Load into ``module``; the first missing, extra or mis-shaped tensor is reported."""
        own = module.state_dict()
        for name, tensor in own.items():
            if name not in self.tensors:
                raise ParameterStoreError(f"checkpoint lacks tensor {name!r}")
            if tuple(self.tensors[name].shape) != tuple(tensor.shape):
                raise ParameterStoreError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(self.tensors[name].shape)}, "
                    f"model {tuple(tensor.shape)}")
        extra = [k for k in self.tensors if k not in own]
        if extra:
            raise ParameterStoreError(f"checkpoint has unexpected tensor {extra[0]!r}")
        module.load_state_dict(self.tensors)
        return module


def save_params(path: str | Path, source: nn.Module | ParameterStore, **meta) -> Path:
    store = source if isinstance(source, ParameterStore) else ParameterStore.from_module(source, **meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": FORMAT_TAG, "version": store.version, "meta": store.meta,
                "tensors": store.tensors}, path)
    return path


def load_params(path: str | Path, expected_version: int = VERSION) -> ParameterStore:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ParameterStoreError(f"{path}: unreadable checkpoint ({exc.__class__.__name__}: {exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != FORMAT_TAG:
        raise ParameterStoreError(f"{path}: not a {FORMAT_TAG} file")
    if blob.get("version") != expected_version:
        raise ParameterStoreError(f"{path}: version {blob.get('version')}, expected {expected_version}")
    return ParameterStore(dict(blob["tensors"]), blob["version"], dict(blob.get("meta", {})))
