"""Least-squares adversarial losses, feature matching and reconstruction.

Every l1/l2 term is a per-element mean over valid (unpadded) positions;
terms are then summed over discriminator heads or layers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .models import DiscriminatorOutput


def masked_mean(x: torch.Tensor, mask: torch.Tensor | None, time_dim: int = -1) -> torch.Tensor:
    """Mean over the valid elements of ``x``.

    ``x`` is ``[B, L]`` or three-dimensional with its time axis at
    ``time_dim`` (``-1`` for channels-first, ``1`` for channels-last);
    ``mask`` is ``[B, L]``.
    """
    if mask is None:
        return x.mean()
    m = mask.to(x.dtype)
    if x.dim() == 2:
        return (x * m).sum() / m.sum().clamp(min=1)
    if time_dim in (-1, 2):
        m, per = m[:, None, :], x.shape[1]
    else:
        m, per = m[:, :, None], x.shape[2]
    return (x * m).sum() / (m.sum() * per).clamp(min=1)


def _heads(out: DiscriminatorOutput):
    return (out.uncond_logits, out.cond_logits)


def lsgan_d_loss(real: DiscriminatorOutput, fake: DiscriminatorOutput) -> torch.Tensor:
    """``mean((D_real - 1)^2) + mean(D_fake^2)`` summed over both heads."""
    total = 0
    for r, f in zip(_heads(real), _heads(fake)):
        total = total + masked_mean((r - 1) ** 2, real.logit_mask) + masked_mean(f ** 2, fake.logit_mask)
    return total


def lsgan_g_adv_loss(fake: DiscriminatorOutput) -> torch.Tensor:
    total = 0
    for f in _heads(fake):
        total = total + masked_mean((f - 1) ** 2, fake.logit_mask)
    return total


def feature_matching_loss(real_feats, fake_feats, masks=None) -> torch.Tensor:
    """Sum over layers of the mean absolute difference between feature maps."""
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"feature lists differ in length: {len(real_feats)} vs {len(fake_feats)}")
    masks = masks if masks is not None else [None] * len(real_feats)
    total = 0
    for i, (r, f, m) in enumerate(zip(real_feats, fake_feats, masks)):
        if r.shape != f.shape:
            raise ValueError(f"feature {i}: shape mismatch {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + masked_mean(torch.abs(r - f), m)
    return total


@dataclass
class LossWeights:
    lambda_d: float = 0.1
    lambda_p: float = 0.1
    lambda_e: float = 0.1


@dataclass
class ReconstructionTerms:
    mel: torch.Tensor
    duration: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    total: torch.Tensor


def reconstruction_loss(x0_pred, x0, log_d_hat, durations, p_hat, pitch, e_hat, energy,
                        mel_mask=None, token_mask=None, w: LossWeights | None = None) -> ReconstructionTerms:
    """MAE on mels plus weighted MSE on log-durations, pitch and energy."""
    w = w or LossWeights()
    if x0_pred.shape != x0.shape:
        raise ValueError(f"reconstruction: mel shapes differ {tuple(x0_pred.shape)} vs {tuple(x0.shape)}")
    for name, a, b in (("duration", log_d_hat, durations), ("pitch", p_hat, pitch), ("energy", e_hat, energy)):
        if a.shape != b.shape:
            raise ValueError(f"reconstruction: {name} shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
    mel = masked_mean(torch.abs(x0_pred - x0), mel_mask, time_dim=1)
    log_d = torch.log(durations.to(log_d_hat.dtype).clamp(min=1))
    dur = masked_mean((log_d_hat - log_d) ** 2, token_mask)
    pit = masked_mean((p_hat - pitch) ** 2, token_mask)
    en = masked_mean((e_hat - energy) ** 2, token_mask)
    total = mel + w.lambda_d * dur + w.lambda_p * pit + w.lambda_e * en
    return ReconstructionTerms(mel, dur, pit, en, total)


def generator_total_loss(adv: torch.Tensor, recon: torch.Tensor, fm: torch.Tensor):
    """``L_G = adv + recon + lambda_fm * fm`` with ``lambda_fm = recon / fm``
    held constant for backpropagation (0 when ``fm`` is 0)."""
    fm_value = float(fm.detach())
    lam = float(recon.detach()) / fm_value if fm_value > 0 else 0.0
    return adv + recon + lam * fm, lam


@dataclass
class LossReport:
    L_D: float = 0.0
    L_adv: float = 0.0
    L_fm: float = 0.0
    L_mel: float = 0.0
    L_duration: float = 0.0
    L_pitch: float = 0.0
    L_energy: float = 0.0
    L_recon: float = 0.0
    L_G: float = 0.0
    lambda_fm: float = 0.0
    skipped: bool = False

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [int(v) if isinstance(v, bool) else v for v in (getattr(self, c) for c in self.columns())]
