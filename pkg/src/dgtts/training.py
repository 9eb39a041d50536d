"""Optimizer, learning-rate schedules and the training procedures.

``train_diffgan`` runs the single-stage adversarial scheme; the two-stage
scheme first fits a basic acoustic model (``train_stage1_basic``), then
trains only the diffusion decoder and discriminator on top of its frozen
weights (``train_two_stage``).
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .config import ModelConfig, TrainConfig
from .diffusion import (
    DiffusionSchedule,
    diffuse_closed_form,
    diffuse_stepwise,
    make_variance_schedule,
    posterior_params,
    posterior_sample,
)
from .layers import VarianceTargets
from .losses import (
    LossReport,
    LossWeights,
    feature_matching_loss,
    generator_total_loss,
    lsgan_d_loss,
    lsgan_g_adv_loss,
    masked_mean,
    reconstruction_loss,
)
from .models import AcousticGenerator, BasicAcousticModel, JCUDiscriminator, build_basic, build_models
from .numerics import DTYPE
from .synthdata import Batch, Utterance, collate

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, p: torch.Tensor) -> "AdamState":
        return cls(torch.zeros_like(p, dtype=DTYPE), torch.zeros_like(p, dtype=DTYPE))


def adam_update(param: torch.Tensor, grad: torch.Tensor, state: AdamState, lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> bool:
    """Bias-corrected Adam step applied in place. Returns False (and leaves
    everything untouched) when the gradient is not finite."""
    if param.shape != grad.shape:
        raise ValueError(f"adam_update: param {tuple(param.shape)} vs grad {tuple(grad.shape)}")
    if not torch.isfinite(grad).all():
        return False
    b1, b2 = betas
    with torch.no_grad():
        state.step += 1
        state.m.mul_(b1).add_(grad, alpha=1 - b1)
        state.v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
        m_hat = state.m / (1 - b1 ** state.step)
        v_hat = state.v / (1 - b2 ** state.step)
        param.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))
    return True


def lr_value(step: int, config: TrainConfig, which: str, hidden: int | None = None) -> float:
    """Learning rate at 1-based update ``step``.

    Generator and discriminator decay by ``lr_decay`` once per
    ``decay_interval`` updates; the basic model follows the inverse-sqrt
    warmup schedule scaled by ``hidden ** -0.5``.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if which == "generator":
        return config.g_lr * config.lr_decay ** (step // config.decay_interval)
    if which == "discriminator":
        return config.d_lr * config.lr_decay ** (step // config.decay_interval)
    if which == "basic":
        if hidden is None:
            raise ValueError("basic-model schedule needs the hidden size")
        return hidden ** -0.5 * min(step ** -0.5, step * config.warmup ** -1.5)
    raise ValueError(f"unknown parameter group {which!r}")


class ParameterStore:
    """Named parameter groups with per-tensor Adam state.

    Tensors whose names start with a frozen prefix are never updated and get
    no optimizer state.
    """

    def __init__(self, modules: dict[str, nn.Module], frozen: dict[str, Sequence[str]] | None = None):
        self.modules = modules
        self.frozen = {g: tuple(frozen.get(g, ())) if frozen else () for g in modules}
        for g, module in modules.items():
            for name, p in module.named_parameters():
                if self.is_frozen(g, name):
                    p.requires_grad_(False)
        self.adam = {g: {n: AdamState.zeros_like(p) for n, p in self.trainable(g)} for g in modules}
        self.updates = {g: 0 for g in modules}
        self.skipped = {g: 0 for g in modules}

    def is_frozen(self, group: str, name: str) -> bool:
        return any(name.startswith(pre) for pre in self.frozen[group])

    def trainable(self, group: str) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.modules[group].named_parameters() if not self.is_frozen(group, n)]

    def apply(self, group: str, grads: Sequence[torch.Tensor | None], lr: float,
              betas: tuple[float, float], eps: float = 1e-8) -> bool:
        params = self.trainable(group)
        grads = [torch.zeros_like(p) if g is None else g for (_, p), g in zip(params, grads)]
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            self.skipped[group] += 1
            log.warning("non-finite gradient in %s, update skipped", group)
            return False
        for (name, p), g in zip(params, grads):
            adam_update(p.data, g, self.adam[group][name], lr, betas, eps)
        self.updates[group] += 1
        return True

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for g, module in self.modules.items():
            for n, p in module.named_parameters():
                out[f"{g}.{n}"] = p.detach()
            for n, st in self.adam[g].items():
                out[f"opt.{g}.{n}.m"] = st.m
                out[f"opt.{g}.{n}.v"] = st.v
        return out

    def meta(self) -> dict[str, str]:
        out = {}
        for g in self.modules:
            out[f"updates.{g}"] = str(self.updates[g])
            out[f"skipped.{g}"] = str(self.skipped[g])
            out[f"frozen.{g}"] = ",".join(self.frozen[g])
        return out

    def load(self, tensors: dict[str, torch.Tensor], meta: dict[str, str], strict: bool = True) -> None:
        with torch.no_grad():
            for g, module in self.modules.items():
                for n, p in module.named_parameters():
                    key = f"{g}.{n}"
                    if key in tensors:
                        p.copy_(tensors[key].reshape(p.shape))
                    elif strict:
                        raise KeyError(f"checkpoint lacks tensor {key}")
                for n, st in self.adam[g].items():
                    if f"opt.{g}.{n}.m" in tensors:
                        st.m.copy_(tensors[f"opt.{g}.{n}.m"].reshape(st.m.shape))
                        st.v.copy_(tensors[f"opt.{g}.{n}.v"].reshape(st.v.shape))
                self.updates[g] = int(meta.get(f"updates.{g}", 0))
                self.skipped[g] = int(meta.get(f"skipped.{g}", 0))
                for st in self.adam[g].values():
                    st.step = self.updates[g]


# ---------------------------------------------------------------------------
# data order and randomness
# ---------------------------------------------------------------------------


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    """Independent torch RNG for one training step, so runs can resume exactly."""
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, step, stream]).generate_state(1)[0]))
    return g


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the mini-batch for 0-based ``step``: shuffled epochs without replacement."""
    if n == 0:
        raise ValueError("dataset is empty")
    m = min(batch_size, n)
    per_epoch = n // m
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[k * m:(k + 1) * m]


def sample_steps(batch_size: int, T: int, gen: torch.Generator) -> torch.Tensor:
    """Diffusion steps drawn uniformly from ``1..T``."""
    return torch.randint(1, T + 1, (batch_size,), generator=gen)


def _randn(shape, gen: torch.Generator, mask: torch.Tensor | None = None) -> torch.Tensor:
    z = torch.randn(shape, generator=gen, dtype=DTYPE)
    return z if mask is None else z * mask[..., None].to(DTYPE)


def targets_of(batch: Batch) -> VarianceTargets:
    return VarianceTargets(batch.durations, batch.pitch, batch.energy)


# ---------------------------------------------------------------------------
# one adversarial step
# ---------------------------------------------------------------------------


@dataclass
class TrainingPair:
    t: torch.Tensor
    x_prev: torch.Tensor
    x_t: torch.Tensor
    posterior_noise: torch.Tensor


def sample_training_pair(batch: Batch, schedule: DiffusionSchedule, gen: torch.Generator) -> TrainingPair:
    """Draw ``t``, then ``x_{t-1} ~ q(x_{t-1}|x_0)`` and ``x_t ~ q(x_t|x_{t-1})``."""
    mask = batch.mel_mask
    t = sample_steps(len(batch), schedule.T, gen)
    n1 = _randn(batch.mels.shape, gen, mask)
    n2 = _randn(batch.mels.shape, gen, mask)
    n3 = _randn(batch.mels.shape, gen, mask)
    x_prev = diffuse_closed_form(batch.mels, t - 1, schedule, n1)
    x_t = diffuse_stepwise(x_prev, t, schedule, n2)
    return TrainingPair(t, x_prev, x_t, n3)


@dataclass
class GeneratorOutput:
    x0_pred: torch.Tensor
    log_d_hat: torch.Tensor
    p_hat: torch.Tensor
    e_hat: torch.Tensor
    x_prev_pred: torch.Tensor
    coarse: torch.Tensor | None = None


def generator_forward(gen: AcousticGenerator, batch: Batch, pair: TrainingPair,
                      schedule: DiffusionSchedule) -> GeneratorOutput:
    cond = gen.condition(batch.tokens, batch.token_lens, batch.speakers, targets_of(batch))
    x0_pred = gen.denoise(pair.x_t, pair.t, cond)
    post = posterior_params(x0_pred, pair.x_t, pair.t, schedule)
    x_prev_pred = posterior_sample(post, pair.posterior_noise)
    a = cond.adapted
    return GeneratorOutput(x0_pred, a.log_d_hat, a.p_hat, a.e_hat, x_prev_pred, cond.coarse)


def discriminator_loss(disc: JCUDiscriminator, batch: Batch, pair: TrainingPair,
                       out: GeneratorOutput) -> torch.Tensor:
    real = disc(pair.x_prev, pair.x_t, pair.t, batch.speakers, batch.mel_lens)
    fake = disc(out.x_prev_pred.detach(), pair.x_t, pair.t, batch.speakers, batch.mel_lens)
    return lsgan_d_loss(real, fake)


def generator_losses(disc: JCUDiscriminator, batch: Batch, pair: TrainingPair, out: GeneratorOutput,
                     weights: LossWeights):
    fake = disc(out.x_prev_pred, pair.x_t, pair.t, batch.speakers, batch.mel_lens)
    with torch.no_grad():
        real = disc(pair.x_prev, pair.x_t, pair.t, batch.speakers, batch.mel_lens)
    adv = lsgan_g_adv_loss(fake)
    fm = feature_matching_loss(real.features, fake.features, fake.feature_masks)
    rec = reconstruction_loss(out.x0_pred, batch.mels, out.log_d_hat, batch.durations, out.p_hat,
                              batch.pitch, out.e_hat, batch.energy, batch.mel_mask, batch.token_mask, weights)
    total, lam = generator_total_loss(adv, rec.total, fm)
    return total, lam, adv, fm, rec


def train_step(batch: Batch, gen: AcousticGenerator, disc: JCUDiscriminator, store: ParameterStore,
               schedule: DiffusionSchedule, config: TrainConfig, rng: torch.Generator) -> LossReport:
    """One discriminator update followed by one generator update."""
    weights = LossWeights(config.lambda_d, config.lambda_p, config.lambda_e)
    betas = (config.adam_beta1, config.adam_beta2)
    pair = sample_training_pair(batch, schedule, rng)
    out = generator_forward(gen, batch, pair, schedule)

    # Step I: discriminator
    L_D = discriminator_loss(disc, batch, pair, out)
    d_params = [p for _, p in store.trainable("disc")]
    d_ok = torch.isfinite(L_D).item()
    if d_ok:
        grads = torch.autograd.grad(L_D, d_params, allow_unused=True)
        lr = lr_value(store.updates["disc"] + 1, config, "discriminator")
        d_ok = store.apply("disc", grads, lr, betas, config.adam_eps)
    else:
        store.skipped["disc"] += 1

    # Step II: generator
    L_G, lam, adv, fm, rec = generator_losses(disc, batch, pair, out, weights)
    g_params = [p for _, p in store.trainable("gen")]
    g_ok = torch.isfinite(L_G).item()
    if g_ok:
        grads = torch.autograd.grad(L_G, g_params, allow_unused=True)
        lr = lr_value(store.updates["gen"] + 1, config, "generator")
        g_ok = store.apply("gen", grads, lr, betas, config.adam_eps)
    else:
        store.skipped["gen"] += 1
    return LossReport(
        L_D=L_D.item(), L_adv=adv.item(), L_fm=fm.item(), L_mel=rec.mel.item(),
        L_duration=rec.duration.item(), L_pitch=rec.pitch.item(), L_energy=rec.energy.item(),
        L_recon=rec.total.item(), L_G=L_G.item(), lambda_fm=lam, skipped=not (d_ok and g_ok))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


class TrainLog:
    """CSV log of per-step losses; appends when resuming."""

    def __init__(self, path: str | os.PathLike | None, columns: Sequence[str], append: bool = False):
        self.path = Path(path) if path is not None else None
        self.columns = ["step", *columns]
        if self.path is not None:
            try:
                if not (append and self.path.exists()):
                    with open(self.path, "w", newline="") as fh:
                        csv.writer(fh).writerow(self.columns)
            except OSError as exc:
                raise OSError(f"cannot write training log {self.path}: {exc}") from exc

    def write(self, step: int, values: Sequence) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, *[repr(v) if isinstance(v, float) else v for v in values]])


@dataclass
class TrainResult:
    generator: AcousticGenerator
    discriminator: JCUDiscriminator
    store: ParameterStore
    history: list[LossReport] = field(default_factory=list)


def make_store(gen: AcousticGenerator, disc: JCUDiscriminator) -> ParameterStore:
    return ParameterStore({"gen": gen, "disc": disc}, frozen={"gen": gen.frozen_prefixes()})


def train_diffgan(dataset: Sequence[Utterance], model_cfg: ModelConfig, config: TrainConfig,
                  out_dir: str | os.PathLike | None = None, resume: bool = False,
                  models: tuple[AcousticGenerator, JCUDiscriminator] | None = None,
                  kind: str = "diffgan", extra_meta: dict | None = None,
                  on_step: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Adversarial training until ``config.steps`` generator updates have run.

    With ``out_dir``, writes ``train_log.csv`` and ``checkpoint.dgtt`` (every
    ``checkpoint_every`` steps and at the end). ``resume`` continues from the
    checkpoint's update counter.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if model_cfg.T != config.T:
        model_cfg = ckpt.replace_T(model_cfg, config.T)
    if models is None:
        gen, disc = build_models(model_cfg, seed=config.seed)
    else:
        gen, disc = models
    gen.train()
    disc.train()
    store = make_store(gen, disc)
    schedule = make_variance_schedule(config.T, config.beta_min, config.beta_max)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / ckpt.CHECKPOINT_NAME if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {ckpt_path}")
        tensors, meta = ckpt.read(ckpt_path)
        store.load(tensors, meta)
    log_path = out_dir / "train_log.csv" if out_dir is not None else None
    tlog = TrainLog(log_path, LossReport.columns(), append=resume)
    result = TrainResult(gen, disc, store)

    def save():
        if ckpt_path is not None:
            meta = {"kind": kind, **model_cfg.to_meta(), **config.to_meta(), **store.meta(), **(extra_meta or {})}
            ckpt.write(ckpt_path, store.tensors(), meta)

    start = store.updates["gen"]
    for step in range(start, config.steps):
        idx = batch_indices(len(dataset), config.batch_size, config.seed, step)
        batch = collate([dataset[i] for i in idx])
        rng = step_generator(config.seed, step)
        report = train_step(batch, gen, disc, store, schedule, config, rng)
        if report.skipped and store.updates["gen"] == step:
            # keep the step counter moving even when an update was rejected
            store.updates["gen"] += 1
        result.history.append(report)
        tlog.write(step + 1, report.row())
        if on_step is not None:
            on_step(step + 1, report)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save()
    save()
    return result


def stage1_mel_objective(x0_hat: torch.Tensor, x0: torch.Tensor, schedule: DiffusionSchedule,
                         noises: Sequence[torch.Tensor], mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over ``t = 0..T`` of the MAE between the diffused prediction and the
    diffused target, with the same noise draw on both branches at each ``t``."""
    if len(noises) != schedule.T + 1:
        raise ValueError(f"need {schedule.T + 1} noise tensors, got {len(noises)}")
    total = 0
    for t in range(schedule.T + 1):
        pred_t = diffuse_closed_form(x0_hat, t, schedule, noises[t])
        true_t = diffuse_closed_form(x0, t, schedule, noises[t])
        total = total + masked_mean(torch.abs(pred_t - true_t), mask, time_dim=1)
    return total


@dataclass
class Stage1Result:
    basic: BasicAcousticModel
    store: ParameterStore
    history: list[dict] = field(default_factory=list)


def train_stage1_basic(dataset: Sequence[Utterance], model_cfg: ModelConfig, config: TrainConfig,
                       out_dir: str | os.PathLike | None = None,
                       basic: BasicAcousticModel | None = None) -> Stage1Result:
    """Fit the basic acoustic model for ``config.stage1_iters`` updates."""
    if config.stage1_iters <= 0:
        raise ValueError("stage1_iters must be positive")
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    basic = basic if basic is not None else build_basic(model_cfg, seed=config.seed)
    basic.train()
    store = ParameterStore({"basic": basic})
    schedule = make_variance_schedule(config.T, config.beta_min, config.beta_max)
    weights = LossWeights(config.lambda_d, config.lambda_p, config.lambda_e)
    betas = (config.stage1_beta1, config.stage1_beta2)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog(out_dir / "stage1_log.csv" if out_dir else None,
                    ["objective", "L_mel", "L_duration", "L_pitch", "L_energy"])
    result = Stage1Result(basic, store)
    params = [p for _, p in store.trainable("basic")]
    for step in range(config.stage1_iters):
        idx = batch_indices(len(dataset), config.batch_size, config.seed + 7919, step)
        batch = collate([dataset[i] for i in idx])
        rng = step_generator(config.seed, step, stream=1)
        x0_hat, adapted = basic(batch.tokens, batch.token_lens, batch.speakers, targets_of(batch))
        rec = reconstruction_loss(x0_hat, batch.mels, adapted.log_d_hat, batch.durations, adapted.p_hat,
                                  batch.pitch, adapted.e_hat, batch.energy, batch.mel_mask, batch.token_mask,
                                  weights)
        if config.stage1_objective == "diffused":
            noises = [_randn(batch.mels.shape, rng, batch.mel_mask) for _ in range(schedule.T + 1)]
            mel_term = stage1_mel_objective(x0_hat, batch.mels, schedule, noises, batch.mel_mask)
            objective = rec.total - rec.mel + mel_term
        else:
            objective = rec.total
        grads = torch.autograd.grad(objective, params, allow_unused=True)
        lr = lr_value(store.updates["basic"] + 1, config, "basic", hidden=model_cfg.hidden)
        store.apply("basic", grads, lr, betas, config.adam_eps)
        row = {"objective": objective.item(), "L_mel": rec.mel.item(), "L_duration": rec.duration.item(),
               "L_pitch": rec.pitch.item(), "L_energy": rec.energy.item()}
        result.history.append(row)
        tlog.write(step + 1, list(row.values()))
    if out_dir is not None:
        meta = {"kind": "basic", **model_cfg.to_meta(), **config.to_meta(), **store.meta()}
        ckpt.write(out_dir / ckpt.STAGE1_NAME, store.tensors(), meta)
    return result


def init_two_stage(model_cfg: ModelConfig, config: TrainConfig,
                   basic_tensors: dict[str, torch.Tensor]) -> tuple[AcousticGenerator, JCUDiscriminator]:
    """Two-stage generator whose basic-model part is copied from stage-1 weights."""
    gen, disc = build_models(model_cfg, seed=config.seed + 1, two_stage=True)
    with torch.no_grad():
        for n, p in gen.basic.named_parameters():
            key = f"basic.{n}"
            if key not in basic_tensors:
                raise KeyError(f"stage-1 checkpoint lacks {key}")
            p.copy_(basic_tensors[key].reshape(p.shape))
    return gen, disc


def train_two_stage(dataset: Sequence[Utterance], model_cfg: ModelConfig, config: TrainConfig,
                    stage1: str | os.PathLike | dict[str, torch.Tensor],
                    out_dir: str | os.PathLike | None = None, resume: bool = False) -> TrainResult:
    """Stage 2: train decoder and discriminator with the basic model frozen."""
    if isinstance(stage1, (str, os.PathLike)):
        path = Path(stage1)
        if not path.exists():
            raise FileNotFoundError(f"stage-1 checkpoint not found: {path}")
        tensors, meta = ckpt.read(path)
        if meta.get("kind") != "basic":
            raise ValueError(f"{path} is not a stage-1 basic-model checkpoint (kind={meta.get('kind')})")
    else:
        tensors = stage1
    models = init_two_stage(model_cfg, config, tensors)
    return train_diffgan(dataset, model_cfg, config, out_dir=out_dir, resume=resume, models=models,
                         kind="two_stage")


def basic_tensors_of(basic: BasicAcousticModel) -> dict[str, torch.Tensor]:
    return {f"basic.{n}": p.detach().clone() for n, p in basic.named_parameters()}
