"""Checkpoint files: the named-tensor format with a ``key=value`` header.

Tensor names are prefixed by parameter group (``gen.``, ``disc.``,
``basic.``) or ``opt.<group>.`` for Adam moments. The header carries the
checkpoint kind (``diffgan``, ``two_stage`` or ``basic``), both configs and
the per-group update counters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import ModelConfig, TrainConfig, replace
from .models import AcousticGenerator, BasicAcousticModel, JCUDiscriminator, build_basic, build_models
from .numerics import load_tensors, save_tensors

CHECKPOINT_NAME = "checkpoint.dgtt"
STAGE1_NAME = "stage1.dgtt"
KINDS = ("diffgan", "two_stage", "basic")


class CheckpointError(ValueError):
    pass


def write(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict[str, str]) -> None:
    save_tensors(path, tensors, meta)


def read(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, meta = load_tensors(path)
    if meta.get("kind") not in KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    return tensors, meta


def replace_T(cfg: ModelConfig, T: int) -> ModelConfig:
    return replace(cfg, T=T)


def _fill(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str, path) -> None:
    with torch.no_grad():
        for n, p in module.named_parameters():
            key = prefix + n
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            src = tensors[key]
            if src.numel() != p.numel():
                raise CheckpointError(f"{path}: {key} has {tuple(src.shape)}, expected {tuple(p.shape)}")
            p.copy_(src.reshape(p.shape))


@dataclass
class LoadedModel:
    kind: str
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    meta: dict[str, str]
    generator: AcousticGenerator | None = None
    discriminator: JCUDiscriminator | None = None
    basic: BasicAcousticModel | None = None


def load_model(path: str | os.PathLike) -> LoadedModel:
    """Rebuild the networks stored in a checkpoint, in eval mode."""
    tensors, meta = read(path)
    model_cfg = ModelConfig.from_meta(meta)
    train_cfg = TrainConfig.from_meta(meta)
    kind = meta["kind"]
    out = LoadedModel(kind, model_cfg, train_cfg, meta)
    if kind == "basic":
        out.basic = build_basic(model_cfg)
        _fill(out.basic, tensors, "basic.", path)
        out.basic.eval()
        return out
    gen, disc = build_models(model_cfg, two_stage=(kind == "two_stage"))
    _fill(gen, tensors, "gen.", path)
    _fill(disc, tensors, "disc.", path)
    gen.eval()
    disc.eval()
    out.generator, out.discriminator = gen, disc
    return out
