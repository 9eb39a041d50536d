"""Acoustic generator, basic acoustic model and the joint conditional /
unconditional discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .layers import (
    AdaptorOutput,
    FFTStack,
    StepEmbedding,
    VarianceAdaptor,
    VarianceTargets,
    _masked,
    adaln_modulate,
    sequence_mask,
)
from .numerics import DTYPE


class TextFrontEnd(nn.Module):
    """Token embedding, FFT encoder, speaker embedding and variance adaptor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.n_tokens + 1, cfg.hidden, padding_idx=0)
        self.encoder = FFTStack(cfg.n_fft_blocks, cfg.hidden, cfg.n_heads, cfg.conv_kernel, cfg.conv_filter)
        self.speaker = nn.Embedding(cfg.n_speakers, cfg.hidden)
        self.adaptor = VarianceAdaptor(cfg.hidden, cfg.predictor_filter, cfg.predictor_kernel)

    def forward(self, tokens: torch.Tensor, token_lens: torch.Tensor, speakers: torch.Tensor,
                targets: VarianceTargets | None = None) -> AdaptorOutput:
        mask = sequence_mask(token_lens, tokens.shape[1])
        h = self.encoder(self.embed(tokens), mask)
        h = _masked(h + self.speaker(speakers)[:, None, :], mask)
        return self.adaptor(h, mask, targets)


class BasicAcousticModel(nn.Module):
    """Front end plus an FFT mel decoder with a linear projection to mel bins."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front = TextFrontEnd(cfg)
        self.mel_decoder = FFTStack(cfg.n_mel_decoder_blocks, cfg.hidden, cfg.n_heads, cfg.conv_kernel,
                                    cfg.conv_filter)
        self.mel_proj = nn.Linear(cfg.hidden, cfg.mel_bins)
        self.passes = 0

    def decode_mel(self, adapted: AdaptorOutput) -> torch.Tensor:
        self.passes += 1
        h = self.mel_decoder(adapted.frames, adapted.mel_mask)
        return _masked(self.mel_proj(h), adapted.mel_mask)

    def forward(self, tokens, token_lens, speakers, targets: VarianceTargets | None = None):
        adapted = self.front(tokens, token_lens, speakers, targets)
        return self.decode_mel(adapted), adapted


class ResidualBlock(nn.Module):
    """Non-causal gated residual block (dilation 1) with encoder and speaker
    conditioning; optionally AdaLN-modulated by a latent style vector."""

    def __init__(self, channels: int, cond_dim: int, kernel: int = 3, latent: bool = False):
        super().__init__()
        self.channels = channels
        self.speaker_proj = nn.Linear(channels, channels)
        self.conv = nn.Conv1d(channels, 2 * channels, kernel, padding=kernel // 2)
        self.cond_proj = nn.Conv1d(cond_dim, 2 * channels, 1)
        self.out_proj = nn.Conv1d(channels, 2 * channels, 1)
        self.style = nn.Linear(channels, 2 * channels) if latent else None

    def forward(self, x, cond, spk, mask=None, w=None):
        # x [B, C, F], cond [B, H, F], spk [B, C]
        y = x + self.speaker_proj(spk)[:, :, None]
        y = self.conv(y) + self.cond_proj(cond)
        gate, filt = y.chunk(2, dim=1)
        y = torch.sigmoid(gate) * torch.tanh(filt)
        residual, skip = self.out_proj(y).chunk(2, dim=1)
        if self.style is not None and w is not None:
            gamma, shift = self.style(w).chunk(2, dim=-1)
            residual = adaln_modulate(residual.transpose(1, 2), gamma[:, None, :], shift[:, None, :]).transpose(1, 2)
        out = (x + residual) / 2 ** 0.5
        if mask is not None:
            m = mask[:, None, :].to(out.dtype)
            out, skip = out * m, skip * m
        return out, skip


class WaveNetDecoder(nn.Module):
    """Predicts ``x_0`` from a noisy mel ``x_t`` and frame-level conditioning."""

    def __init__(self, cfg: ModelConfig, coarse: bool = False):
        super().__init__()
        C = cfg.wavenet_hidden
        self.mel_bins = cfg.mel_bins
        self.input_proj = nn.Conv1d(cfg.mel_bins, C, 1)
        self.step = StepEmbedding(C)
        self.speaker = nn.Embedding(cfg.n_speakers, C)
        self.coarse_proj = nn.Conv1d(cfg.mel_bins, C, 1) if coarse else None
        self.latent_dim = cfg.latent_dim
        self.mapping = nn.Linear(cfg.latent_dim, C) if cfg.latent_dim else None
        self.blocks = nn.ModuleList(ResidualBlock(C, cfg.hidden, latent=bool(cfg.latent_dim))
                                    for _ in range(cfg.n_wavenet_blocks))
        self.skip_proj = nn.Conv1d(C, C, 1)
        self.output_proj = nn.Conv1d(C, cfg.mel_bins, 1)
        self.passes = 0

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor, speakers: torch.Tensor,
                mask: torch.Tensor | None = None, coarse: torch.Tensor | None = None,
                z: torch.Tensor | None = None) -> torch.Tensor:
        if x_t.shape[:2] != cond.shape[:2]:
            raise ValueError(f"decoder: frame mismatch between x_t {tuple(x_t.shape)} and cond {tuple(cond.shape)}")
        if (coarse is None) != (self.coarse_proj is None):
            raise ValueError("decoder: coarse mel must be given exactly when built for two-stage conditioning")
        self.passes += 1
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        x = F.relu(self.input_proj(x_t.transpose(1, 2)))
        x = x + self.step(t)[:, :, None]
        if coarse is not None:
            x = x + self.coarse_proj(coarse.transpose(1, 2))
        if mask is not None:
            x = x * mask[:, None, :].to(x.dtype)
        w = None
        if self.mapping is not None:
            if z is None:
                raise ValueError("decoder built with a latent input needs z")
            w = self.mapping(z)
        spk = self.speaker(speakers)
        c = cond.transpose(1, 2)
        skips = 0
        for block in self.blocks:
            x, s = block(x, c, spk, mask, w)
            skips = skips + s
        skips = skips / len(self.blocks) ** 0.5
        out = self.output_proj(F.relu(self.skip_proj(skips))).transpose(1, 2)
        return _masked(out, mask)


@dataclass
class DiscriminatorOutput:
    uncond_logits: torch.Tensor  # [B, 1, L']
    cond_logits: torch.Tensor
    features: list[torch.Tensor] = field(default_factory=list)
    logit_mask: torch.Tensor | None = None  # [B, L']
    feature_masks: list[torch.Tensor | None] = field(default_factory=list)


def conv_out_lengths(lengths: torch.Tensor, kernel: int, stride: int) -> torch.Tensor:
    pad = kernel // 2
    return torch.div(lengths + 2 * pad - kernel, stride, rounding_mode="floor") + 1


class JCUDiscriminator(nn.Module):
    """Shared three-layer Conv1D trunk with an unconditional head and a head
    conditioned on the diffusion step and speaker.

    The inputs ``x_{t-1}`` and ``x_t`` are stacked on the channel axis. The
    conditional head adds the summed step and speaker embeddings after its
    first convolution. Hidden activations of the trunk and of each head's first
    layer are returned as feature maps.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch, ks, st = cfg.disc_channels, cfg.disc_kernels, cfg.disc_strides
        self.kernels, self.strides = ks, st
        ins = [2 * cfg.mel_bins, ch[0], ch[1]]
        self.trunk = nn.ModuleList(
            nn.Conv1d(ins[i], ch[i], ks[i], stride=st[i], padding=ks[i] // 2) for i in range(3))

        def head():
            return nn.ModuleList([
                nn.Conv1d(ch[2], ch[3], ks[3], stride=st[3], padding=ks[3] // 2),
                nn.Conv1d(ch[3], ch[4], ks[4], stride=st[4], padding=ks[4] // 2),
            ])

        self.uncond = head()
        self.cond = head()
        self.step = StepEmbedding(ch[3])
        self.speaker = nn.Embedding(cfg.n_speakers, ch[3])

    def output_lengths(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """Valid lengths after each of the five convolutions."""
        out, cur = [], torch.as_tensor(frames)
        for k, s in zip(self.kernels, self.strides):
            cur = conv_out_lengths(cur, k, s)
            out.append(cur)
        return out

    def forward(self, x_prev: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor, speakers: torch.Tensor,
                mel_lens: torch.Tensor | None = None) -> DiscriminatorOutput:
        if x_prev.shape != x_t.shape:
            raise ValueError(f"discriminator: x_prev {tuple(x_prev.shape)} and x_t {tuple(x_t.shape)} differ")
        B, frames, _ = x_t.shape
        lens = self.output_lengths(mel_lens) if mel_lens is not None else None

        def mask_at(i, h):
            if lens is None:
                return None
            return sequence_mask(lens[i], h.shape[-1])

        def apply(h, m):
            return h if m is None else h * m[:, None, :].to(h.dtype)

        h = torch.cat([x_prev, x_t], dim=-1).transpose(1, 2)
        features, fmasks = [], []
        for i, conv in enumerate(self.trunk):
            h = F.leaky_relu(conv(h), 0.2)
            m = mask_at(i, h)
            h = apply(h, m)
            features.append(h)
            fmasks.append(m)

        t = torch.as_tensor(t).reshape(-1).expand(B)
        u = F.leaky_relu(self.uncond[0](h), 0.2)
        m3 = mask_at(3, u)
        u = apply(u, m3)
        emb = self.step(t) + self.speaker(speakers)
        c = F.leaky_relu(self.cond[0](h) + emb[:, :, None], 0.2)
        c = apply(c, m3)
        features += [u, c]
        fmasks += [m3, m3]
        m4 = mask_at(4, u)
        u_logits = apply(self.uncond[1](u), m4)
        c_logits = apply(self.cond[1](c), m4)
        return DiscriminatorOutput(u_logits, c_logits, features, m4, fmasks)


@dataclass
class Conditioning:
    """Everything the diffusion decoder needs besides ``x_t`` and ``t``."""

    adapted: AdaptorOutput
    speakers: torch.Tensor
    coarse: torch.Tensor | None = None

    @property
    def mask(self) -> torch.Tensor:
        return self.adapted.mel_mask

    @property
    def mel_lens(self) -> torch.Tensor:
        return self.adapted.mel_lens


class AcousticGenerator(nn.Module):
    """Text front end and WaveNet diffusion decoder.

    In two-stage mode the front end and a mel decoder come from a
    :class:`BasicAcousticModel` (held as ``self.basic``); its coarse mel is
    fed to the diffusion decoder as extra conditioning.
    """

    def __init__(self, cfg: ModelConfig, two_stage: bool = False):
        super().__init__()
        self.cfg = cfg
        self.two_stage = two_stage
        if two_stage:
            self.basic = BasicAcousticModel(cfg)
        else:
            self.front = TextFrontEnd(cfg)
        self.decoder = WaveNetDecoder(cfg, coarse=two_stage)

    def frozen_prefixes(self) -> tuple[str, ...]:
        return ("basic.",) if self.two_stage else ()

    def condition(self, tokens, token_lens, speakers, targets: VarianceTargets | None = None) -> Conditioning:
        if self.two_stage:
            coarse, adapted = self.basic(tokens, token_lens, speakers, targets)
            return Conditioning(adapted, speakers, coarse)
        return Conditioning(self.front(tokens, token_lens, speakers, targets), speakers)

    def denoise(self, x_t: torch.Tensor, t, cond: Conditioning, z: torch.Tensor | None = None) -> torch.Tensor:
        """One decoder pass predicting ``x_0``."""
        return self.decoder(x_t, cond.adapted.frames, t, cond.speakers, cond.mask, cond.coarse, z)


def build_models(cfg: ModelConfig, seed: int = 0, two_stage: bool = False):
    """Deterministically initialize (generator, discriminator)."""
    torch.manual_seed(seed)
    gen = AcousticGenerator(cfg, two_stage=two_stage).to(DTYPE)
    disc = JCUDiscriminator(cfg).to(DTYPE)
    return gen, disc


def build_basic(cfg: ModelConfig, seed: int = 0) -> BasicAcousticModel:
    torch.manual_seed(seed)
    return BasicAcousticModel(cfg).to(DTYPE)
