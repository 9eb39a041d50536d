"""Central-difference gradient checks for every parameterized block."""

from __future__ import annotations

from typing import Callable

import torch

from .config import ModelConfig
from .layers import (
    FFTBlock,
    MultiHeadAttention,
    StepEmbedding,
    VarianceAdaptor,
    VariancePredictor,
    VarianceTargets,
    sequence_mask,
)
from .models import (
    AcousticGenerator,
    BasicAcousticModel,
    JCUDiscriminator,
    ResidualBlock,
    WaveNetDecoder,
)
from .numerics import DTYPE, GradCheckReport, grad_check_module


def _projector(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(out.shape, generator=gen, dtype=DTYPE)


def _scalarize(fn: Callable[[], torch.Tensor], gen: torch.Generator) -> Callable[[], torch.Tensor]:
    """Turn a tensor-valued closure into ``<fn(), w>`` with a fixed random ``w``."""
    w = _projector(fn(), gen)
    return lambda: (fn() * w).sum()


def _dt(*shape, gen):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


def block_cases(cfg: ModelConfig, seed: int = 0) -> dict[str, tuple[torch.nn.Module, Callable, dict]]:
    """``name -> (module, tensor-valued closure, extra input tensors)``."""
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    B, N = 2, 5
    H, C, M = cfg.hidden, cfg.wavenet_hidden, cfg.mel_bins
    token_lens = torch.tensor([N, N - 2])
    tmask = sequence_mask(token_lens, N)
    durations = torch.tensor([[1, 2, 1, 2, 2], [2, 1, 3, 0, 0]])
    frames = int(durations.sum(1).max())
    mel_lens = durations.sum(1)
    fmask = sequence_mask(mel_lens, frames)
    pitch, energy = _dt(B, N, gen=g) * tmask, _dt(B, N, gen=g) * tmask
    targets = VarianceTargets(durations, pitch, energy)
    tokens = torch.randint(1, cfg.n_tokens + 1, (B, N), generator=g) * tmask.long()
    speakers = torch.tensor([0, min(1, cfg.n_speakers - 1)])
    t = torch.tensor([1, cfg.T])
    cases = {}

    emb = StepEmbedding(C).to(DTYPE)
    cases["step_embedding"] = (emb, lambda: emb(t), {})

    h = _dt(B, N, H, gen=g).requires_grad_()
    mha = MultiHeadAttention(H, cfg.n_heads).to(DTYPE)
    cases["attention"] = (mha, lambda: mha(h, tmask) * tmask[..., None], {"input": h})

    fft = FFTBlock(H, cfg.n_heads, cfg.conv_kernel, cfg.conv_filter).to(DTYPE)
    cases["fft_block"] = (fft, lambda: fft(h, tmask), {"input": h})

    vp = VariancePredictor(H, cfg.predictor_filter, cfg.predictor_kernel).to(DTYPE)
    cases["variance_predictor"] = (vp, lambda: vp(h, tmask), {"input": h})

    va = VarianceAdaptor(H, cfg.predictor_filter, cfg.predictor_kernel).to(DTYPE)

    def adaptor():
        out = va(h, tmask, targets)
        return torch.cat([out.frames.flatten(), out.log_d_hat.flatten(), out.p_hat.flatten(), out.e_hat.flatten()])

    cases["variance_adaptor"] = (va, adaptor, {"input": h})

    x = _dt(B, C, frames, gen=g).requires_grad_()
    cond = _dt(B, H, frames, gen=g)
    spk = _dt(B, C, gen=g)
    rb = ResidualBlock(C, H).to(DTYPE)
    cases["residual_block"] = (rb, lambda: torch.cat([o.flatten() for o in rb(x, cond, spk, fmask)]), {"input": x})

    w_lat = _dt(B, C, gen=g)
    rb_style = ResidualBlock(C, H, latent=True).to(DTYPE)
    cases["residual_block_adaln"] = (
        rb_style, lambda: torch.cat([o.flatten() for o in rb_style(x, cond, spk, fmask, w_lat)]), {"input": x})

    x_t = _dt(B, frames, M, gen=g).requires_grad_()
    cond_frames = _dt(B, frames, H, gen=g)
    dec = WaveNetDecoder(cfg).to(DTYPE)
    cases["wavenet_decoder"] = (dec, lambda: dec(x_t, cond_frames, t, speakers, fmask), {"input": x_t})

    x_prev = _dt(B, frames, M, gen=g).requires_grad_()
    disc = JCUDiscriminator(cfg).to(DTYPE)

    def discriminator():
        o = disc(x_prev, x_t, t, speakers, mel_lens)
        return torch.cat([o.uncond_logits.flatten(), o.cond_logits.flatten()] + [f.flatten() for f in o.features])

    cases["discriminator"] = (disc, discriminator, {"input": x_prev})

    basic = BasicAcousticModel(cfg).to(DTYPE)
    cases["basic_model"] = (basic, lambda: basic(tokens, token_lens, speakers, targets)[0], {})

    gen1 = AcousticGenerator(cfg).to(DTYPE)
    cases["generator"] = (
        gen1, lambda: gen1.denoise(x_t, t, gen1.condition(tokens, token_lens, speakers, targets)), {})

    gen2 = AcousticGenerator(cfg, two_stage=True).to(DTYPE)
    cases["generator_two_stage"] = (
        gen2, lambda: gen2.denoise(x_t, t, gen2.condition(tokens, token_lens, speakers, targets)), {})
    return cases


def run_block_checks(cfg: ModelConfig, max_coords: int | None = 6, seed: int = 0,
                     tolerance: float = 1e-4, only: list[str] | None = None) -> dict[str, GradCheckReport]:
    """Gradient-check each block; ``max_coords`` limits perturbed coordinates
    per tensor (``None`` checks all of them)."""
    g = torch.Generator().manual_seed(seed + 1)
    reports = {}
    for name, (module, fn, extra) in block_cases(cfg, seed).items():
        if only is not None and name not in only:
            continue
        module.train()
        loss = _scalarize(fn, g)
        reports[name] = grad_check_module(module, loss, tolerance=tolerance, max_coords=max_coords,
                                          extra=extra, seed=seed)
    return reports
