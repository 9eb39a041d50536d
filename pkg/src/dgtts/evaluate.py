"""Held-out evaluation of trained models on teacher-forced frame grids."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .diffusion import make_variance_schedule
from .inference import InferenceRequest, denoise_chain, shallow_one_step
from .losses import masked_mean
from .metrics import ssim
from .models import AcousticGenerator, BasicAcousticModel
from .synthdata import Utterance, collate, speaker_mean_frames
from .training import sample_training_pair, step_generator, targets_of


def chain_ssim(gen: AcousticGenerator, utts: Sequence[Utterance], seed: int = 0) -> float:
    """Mean SSIM of the T-step chain output against ``x_0``."""
    vals = []
    for i, u in enumerate(utts):
        req = InferenceRequest.from_utterance(u, teacher_forced=True, seed=seed + i)
        vals.append(ssim(u.x0, denoise_chain(req, gen).mel))
    return float(np.mean(vals))


def shallow_ssim(gen: AcousticGenerator, utts: Sequence[Utterance], seed: int = 0) -> float:
    vals = []
    for i, u in enumerate(utts):
        req = InferenceRequest.from_utterance(u, teacher_forced=True, seed=seed + i)
        vals.append(ssim(u.x0, shallow_one_step(req, gen).mel))
    return float(np.mean(vals))


@torch.no_grad()
def basic_ssim(basic: BasicAcousticModel, utts: Sequence[Utterance]) -> float:
    basic.eval()
    vals = []
    for u in utts:
        b = collate([u])
        mel, _ = basic(b.tokens, b.token_lens, b.speakers, targets_of(b))
        vals.append(ssim(u.x0, mel[0]))
    return float(np.mean(vals))


def speaker_mean_ssim(train: Sequence[Utterance], utts: Sequence[Utterance], n_speakers: int) -> float:
    """Baseline: every frame replaced by the speaker's mean training frame."""
    means = speaker_mean_frames(train, n_speakers)
    return float(np.mean([ssim(u.x0, np.repeat(means[u.speaker][None], u.frames, axis=0)) for u in utts]))


@torch.no_grad()
def mel_loss(gen: AcousticGenerator, utts: Sequence[Utterance], config: TrainConfig, seed: int = 12345,
             batch_size: int = 16) -> float:
    """Mean teacher-forced ``x_0`` MAE under the training distribution of
    ``(t, x_t)``, with fixed noise so checkpoints compare on equal terms."""
    schedule = make_variance_schedule(config.T, config.beta_min, config.beta_max)
    was_training = gen.training
    gen.eval()
    total, weight = 0.0, 0
    for k in range(0, len(utts), batch_size):
        batch = collate(list(utts[k:k + batch_size]))
        pair = sample_training_pair(batch, schedule, step_generator(seed, k))
        cond = gen.condition(batch.tokens, batch.token_lens, batch.speakers, targets_of(batch))
        x0_pred = gen.denoise(pair.x_t, pair.t, cond)
        n = int(batch.mel_lens.sum())
        total += float(masked_mean(torch.abs(x0_pred - batch.mels), batch.mel_mask, time_dim=1)) * n
        weight += n
    gen.train(was_training)
    return total / weight
