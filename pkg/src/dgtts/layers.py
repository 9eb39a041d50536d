"""Building blocks shared by the generator, the basic acoustic model and the
discriminator. Sequences are batch-first ``[B, L, C]``; masks are boolean
``[B, L]`` with ``True`` on valid positions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

LN_EPS = 1e-5


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """``[..., dim]`` encoding: first half sines, second half cosines."""
    if dim % 2:
        raise ValueError(f"sinusoidal embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def sinusoidal_step_embedding(t, dim: int) -> torch.Tensor:
    """Encoding of a diffusion step index (int or tensor of ints)."""
    return sinusoidal_embedding(torch.as_tensor(t), dim)


def swish(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


class StepEmbedding(nn.Module):
    """Sinusoidal step code followed by FC -> Swish -> FC."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(swish(self.fc1(sinusoidal_step_embedding(t, self.dim))))


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len)[None, :] < lengths[:, None]


def _masked(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    return x if mask is None else x * mask[..., None].to(x.dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int):
        super().__init__()
        if hidden % n_heads:
            raise ValueError(f"hidden={hidden} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.o = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        B, L, H = x.shape
        dh = H // self.n_heads

        def split(t):
            return t.view(B, L, self.n_heads, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, H)
        return self.o(out)


class FFTBlock(nn.Module):
    """Self-attention and a convolutional feed-forward, each with a residual
    connection followed by layer normalization."""

    def __init__(self, hidden: int, n_heads: int, kernel: int, filter_size: int):
        super().__init__()
        self.hidden = hidden
        self.attn = MultiHeadAttention(hidden, n_heads)
        self.norm1 = nn.LayerNorm(hidden, eps=LN_EPS)
        self.conv1 = nn.Conv1d(hidden, filter_size, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(filter_size, hidden, 1)
        self.norm2 = nn.LayerNorm(hidden, eps=LN_EPS)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.hidden:
            raise ValueError(f"FFTBlock expects hidden={self.hidden}, got input {tuple(x.shape)}")
        x = _masked(self.norm1(x + self.attn(x, mask)), mask)
        y = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return _masked(self.norm2(x + y), mask)


class FFTStack(nn.Module):
    """Positional encoding plus a stack of FFT blocks."""

    def __init__(self, n_blocks: int, hidden: int, n_heads: int, kernel: int, filter_size: int):
        super().__init__()
        self.hidden = hidden
        self.blocks = nn.ModuleList(FFTBlock(hidden, n_heads, kernel, filter_size) for _ in range(n_blocks))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        pos = sinusoidal_embedding(torch.arange(x.shape[1]), self.hidden)
        x = _masked(x + pos, mask)
        for block in self.blocks:
            x = block(x, mask)
        return x


class VariancePredictor(nn.Module):
    """Conv-ReLU-LN twice, then a scalar projection per position."""

    def __init__(self, hidden: int, filter_size: int, kernel: int):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, filter_size, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(filter_size, eps=LN_EPS)
        self.conv2 = nn.Conv1d(filter_size, filter_size, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(filter_size, eps=LN_EPS)
        self.proj = nn.Linear(filter_size, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = _masked(x, mask)
        h = self.norm1(F.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2))
        h = _masked(h, mask)
        h = self.norm2(F.relu(self.conv2(h.transpose(1, 2))).transpose(1, 2))
        out = self.proj(h).squeeze(-1)
        return out if mask is None else out * mask.to(out.dtype)


def length_regulate(h: torch.Tensor, durations: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Repeat row ``i`` of ``h`` ``durations[i]`` times.

    Accepts ``[N, H]`` with ``[N]`` durations, or a padded batch ``[B, N, H]``
    with ``[B, N]`` durations (padding tokens must have duration 0). Returns
    the expanded tensor and the per-item frame counts.
    """
    durations = torch.as_tensor(durations)
    if durations.dtype.is_floating_point:
        if not torch.equal(durations, durations.round()):
            raise ValueError("durations must be integers")
        durations = durations.long()
    if (durations < 0).any():
        raise ValueError(f"durations must be nonnegative, got {durations.tolist()}")
    if h.dim() == 2:
        if durations.shape != h.shape[:1]:
            raise ValueError(f"length_regulate: {tuple(durations.shape)} durations for {h.shape[0]} tokens")
        out = torch.repeat_interleave(h, durations, dim=0)
        if out.shape[0] == 0:
            log.warning("length_regulate: all durations are zero, output has no frames")
        return out, torch.tensor(out.shape[0])
    if durations.shape != h.shape[:2]:
        raise ValueError(f"length_regulate: durations {tuple(durations.shape)} vs tokens {tuple(h.shape[:2])}")
    lens = durations.sum(dim=1)
    max_len = int(lens.max()) if lens.numel() else 0
    if max_len == 0:
        log.warning("length_regulate: all durations are zero, output has no frames")
    rows = []
    for i in range(h.shape[0]):
        r = torch.repeat_interleave(h[i], durations[i], dim=0)
        rows.append(F.pad(r, (0, 0, 0, max_len - r.shape[0])))
    return torch.stack(rows), lens


def inference_durations(log_d_hat: torch.Tensor, token_mask: torch.Tensor | None = None) -> torch.Tensor:
    """``max(1, round(exp(log_d_hat)))`` per valid token, 0 on padding."""
    d = torch.clamp(torch.round(torch.exp(log_d_hat.detach())), min=1).long()
    return d if token_mask is None else d * token_mask.long()


@dataclass
class VarianceTargets:
    durations: torch.Tensor  # [B, N] long
    pitch: torch.Tensor  # [B, N]
    energy: torch.Tensor  # [B, N]


@dataclass
class AdaptorOutput:
    frames: torch.Tensor  # [B, F, H]
    mel_lens: torch.Tensor  # [B]
    mel_mask: torch.Tensor  # [B, F]
    log_d_hat: torch.Tensor  # [B, N]
    p_hat: torch.Tensor
    e_hat: torch.Tensor
    durations: torch.Tensor  # durations actually used


class VarianceAdaptor(nn.Module):
    """Duration, pitch and energy predictors plus length regulation.

    Pitch and energy enter the hidden states through scalar linear
    projections. With ``targets`` the ground-truth values are used both for
    the projections and for the frame grid (teacher forcing); without them
    the predictions are used.
    """

    def __init__(self, hidden: int, filter_size: int, kernel: int):
        super().__init__()
        self.duration = VariancePredictor(hidden, filter_size, kernel)
        self.pitch = VariancePredictor(hidden, filter_size, kernel)
        self.energy = VariancePredictor(hidden, filter_size, kernel)
        self.pitch_proj = nn.Linear(1, hidden)
        self.energy_proj = nn.Linear(1, hidden)

    def forward(self, h: torch.Tensor, mask: torch.Tensor, targets: VarianceTargets | None = None) -> AdaptorOutput:
        if self.training and targets is None:
            raise ValueError("variance adaptor in training mode needs duration/pitch/energy targets")
        log_d_hat = self.duration(h, mask)
        p_hat = self.pitch(h, mask)
        p = targets.pitch if targets is not None else p_hat
        h = h + _masked(self.pitch_proj(p[..., None]), mask)
        e_hat = self.energy(h, mask)
        e = targets.energy if targets is not None else e_hat
        h = h + _masked(self.energy_proj(e[..., None]), mask)
        if targets is not None:
            durations = targets.durations * mask.long()
        else:
            durations = inference_durations(log_d_hat, mask)
        frames, lens = length_regulate(h, durations)
        mel_mask = sequence_mask(lens, frames.shape[1])
        return AdaptorOutput(frames, lens, mel_mask, log_d_hat, p_hat, e_hat, durations)


def layer_normalize(h: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    mean = h.mean(dim=-1, keepdim=True)
    var = h.var(dim=-1, keepdim=True, unbiased=False)
    return (h - mean) / torch.sqrt(var + eps)


def adaln_modulate(h: torch.Tensor, gamma: torch.Tensor, beta_shift: torch.Tensor) -> torch.Tensor:
    """Normalize ``h`` over its channel (last) axis, then scale and shift.

    ``gamma``/``beta_shift`` must broadcast against ``h`` along channels,
    e.g. ``[C]`` or ``[B, 1, C]``.
    """
    C = h.shape[-1]
    for name, v in (("gamma", gamma), ("beta_shift", beta_shift)):
        if v.shape[-1] != C:
            raise ValueError(f"adaln_modulate: {name} {tuple(v.shape)} does not match channels {C} of {tuple(h.shape)}")
    return layer_normalize(h) * gamma + beta_shift
