"""Sampling: the T-step denoising chain, one-step shallow refinement for the
two-stage model, and repeated sampling for output-variation analysis."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .diffusion import DiffusionSchedule, diffuse_closed_form, make_variance_schedule, posterior_params
from .layers import VarianceTargets
from .models import AcousticGenerator
from .numerics import DTYPE
from .synthdata import frame_log_energy


@dataclass
class InferenceRequest:
    """One synthesis request.

    Args:
        tokens: token ids (1-based, no padding).
        speaker: speaker id.
        T_override: number of denoising steps; defaults to the model's T.
        seed: seed for the prior and posterior noise.
        n_samples: number of samples for variation analysis.
        targets: optional ground-truth (durations, pitch, energy) for
            teacher-forced synthesis on the reference frame grid.
    """

    tokens: Sequence[int]
    speaker: int
    T_override: int | None = None
    seed: int = 0
    n_samples: int = 1
    targets: tuple | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if len(self.tokens) == 0:
            raise ValueError("empty token sequence")

    @classmethod
    def from_utterance(cls, utt, teacher_forced: bool = False, **kw) -> "InferenceRequest":
        targets = (utt.d, utt.p, utt.e) if teacher_forced else None
        return cls(tokens=list(utt.tokens), speaker=int(utt.speaker), targets=targets, **kw)

    def batch(self):
        tokens = torch.tensor([list(self.tokens)], dtype=torch.long)
        lens = torch.tensor([len(self.tokens)])
        spk = torch.tensor([self.speaker])
        targets = None
        if self.targets is not None:
            d, p, e = self.targets
            targets = VarianceTargets(torch.as_tensor(np.asarray(d))[None].long(),
                                      torch.as_tensor(np.asarray(p), dtype=DTYPE)[None],
                                      torch.as_tensor(np.asarray(e), dtype=DTYPE)[None])
        return tokens, lens, spk, targets


@dataclass
class ChainResult:
    mel: torch.Tensor  # [frames, mel_bins]
    trace: list[tuple[int, torch.Tensor]] = field(default_factory=list)  # (t, x_t) for t = T..1
    decoder_passes: int = 0


def schedule_for(gen: AcousticGenerator, req: InferenceRequest, schedule: DiffusionSchedule | None):
    if schedule is not None:
        return schedule
    return make_variance_schedule(req.T_override or gen.cfg.T)


def _noise(shape, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=DTYPE)


@torch.no_grad()
def denoise_chain(req: InferenceRequest, gen: AcousticGenerator, schedule: DiffusionSchedule | None = None,
                  trace: bool = False, z: torch.Tensor | None = None) -> ChainResult:
    """Draw ``x_T`` from the prior on the predicted frame grid, then run ``T``
    decoder passes, sampling the posterior in between. The last step returns
    the posterior mean, which equals the predicted ``x_0``."""
    schedule = schedule_for(gen, req, schedule)
    gen.eval()
    rng = torch.Generator()
    rng.manual_seed(req.seed)
    tokens, lens, spk, targets = req.batch()
    cond = gen.condition(tokens, lens, spk, targets)
    frames = int(cond.mel_lens[0])
    x = _noise((1, frames, gen.cfg.mel_bins), rng)
    before = gen.decoder.passes
    out = ChainResult(mel=x[0])
    for t in range(schedule.T, 0, -1):
        if trace:
            out.trace.append((t, x[0].clone()))
        x0 = gen.denoise(x, t, cond, z)
        post = posterior_params(x0, x, t, schedule)
        if t > 1:
            x = post.mean + torch.sqrt(post.variance) * _noise(x.shape, rng)
        else:
            x = post.mean
    out.mel = x[0]
    out.decoder_passes = gen.decoder.passes - before
    return out


@dataclass
class ShallowResult:
    mel: torch.Tensor
    coarse: torch.Tensor
    basic_passes: int
    decoder_passes: int


@torch.no_grad()
def shallow_one_step(req: InferenceRequest, gen: AcousticGenerator,
                     schedule: DiffusionSchedule | None = None) -> ShallowResult:
    """Coarse mel from the basic model, diffuse it to ``t = 1``, and let one
    decoder pass predict the refined ``x_0``."""
    if not gen.two_stage:
        raise ValueError("shallow one-step inference needs a two-stage generator (checkpoint kind two_stage)")
    schedule = schedule_for(gen, req, schedule)
    gen.eval()
    rng = torch.Generator()
    rng.manual_seed(req.seed)
    tokens, lens, spk, targets = req.batch()
    b0, d0 = gen.basic.passes, gen.decoder.passes
    cond = gen.condition(tokens, lens, spk, targets)
    coarse = cond.coarse
    x1 = diffuse_closed_form(coarse, 1, schedule, _noise(coarse.shape, rng)) * cond.mask[..., None]
    mel = gen.denoise(x1, 1, cond)
    return ShallowResult(mel[0], coarse[0], gen.basic.passes - b0, gen.decoder.passes - d0)


def spectral_centroid(mel: np.ndarray) -> np.ndarray:
    """Per-frame centroid (in bin units) of the linear-amplitude spectrum."""
    w = np.exp(mel - mel.max(axis=-1, keepdims=True))
    k = np.arange(mel.shape[-1])
    return (w * k).sum(axis=-1) / w.sum(axis=-1)


@dataclass
class VariationResult:
    seeds: list[int]
    mels: list[np.ndarray]
    energy: list[np.ndarray]
    centroid: list[np.ndarray]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "seed", "frame", "energy", "centroid"])
        for i, (s, e, c) in enumerate(zip(self.seeds, self.energy, self.centroid)):
            for f in range(len(e)):
                w.writerow([i, s, f, repr(float(e[f])), repr(float(c[f]))])
        return buf.getvalue()

    def contour_variance(self) -> float:
        """Mean over frames of the across-sample variance of the centroid
        contour (samples truncated to the shortest)."""
        n = min(len(c) for c in self.centroid)
        stack = np.stack([c[:n] for c in self.centroid])
        return float(stack.var(axis=0).mean())


def variation_analysis(req: InferenceRequest, gen: AcousticGenerator, schedule: DiffusionSchedule | None = None,
                       seeds: Sequence[int] | None = None) -> VariationResult:
    """Sample ``req.n_samples`` outputs with seeds ``req.seed + i`` (or the
    given ``seeds``) and compute energy and spectral-centroid contours."""
    if seeds is None:
        if req.n_samples < 2:
            raise ValueError("variation analysis needs n_samples >= 2")
        seeds = [req.seed + i for i in range(req.n_samples)]
    res = VariationResult(list(seeds), [], [], [])
    for s in seeds:
        r = InferenceRequest(req.tokens, req.speaker, req.T_override, s, 1, req.targets)
        mel = denoise_chain(r, gen, schedule).mel.numpy()
        res.mels.append(mel)
        res.energy.append(frame_log_energy(mel))
        res.centroid.append(spectral_centroid(mel))
    return res


def pgm_bytes(mel: np.ndarray) -> bytes:
    """8-bit binary PGM; row = mel bin, column = frame, min-max normalized."""
    img = np.asarray(mel, dtype=np.float64).T
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path: str | os.PathLike, mel: np.ndarray) -> None:
    try:
        Path(path).write_bytes(pgm_bytes(mel))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
