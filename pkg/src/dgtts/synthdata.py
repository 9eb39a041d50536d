"""Seeded synthetic multi-speaker corpus with ground-truth duration, pitch and energy.

Every utterance is a duration-expanded sequence of per-token spectral
templates shaped by a speaker envelope. Pitch moves a resonance bump along the
frequency axis, so the per-token pitch label is recoverable from the
spectrogram, and it carries per-utterance jitter so the same text maps to
several plausible outputs.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .layers import sequence_mask
from .numerics import DTYPE

log = logging.getLogger(__name__)

MEL_CLIP = 4.0
MANIFEST = "manifest.jsonl"
MELS = "mels.bin"
SPEC = "corpus.json"


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSpec:
    n_speakers: int = 4
    n_tokens: int = 24
    n_utterances: int = 64
    min_frames: int = 24
    max_frames: int = 64
    mel_bins: int = 16
    seed: int = 0
    noise: float = 0.1

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_tokens < 1 or self.mel_bins < 2:
            raise ValueError("n_speakers, n_tokens must be >= 1 and mel_bins >= 2")
        if self.n_utterances < 0:
            raise ValueError("n_utterances must be >= 0")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError(f"need 1 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")


@dataclass
class Utterance:
    id: str
    speaker: int
    tokens: np.ndarray  # int64 ids in 1..n_tokens (0 is padding)
    x0: np.ndarray  # [frames, mel_bins] log-amplitude
    d: np.ndarray  # int64 frames per token
    p: np.ndarray  # per-token pitch, arbitrary units
    e: np.ndarray  # per-token mean frame log-energy

    def __post_init__(self):
        if int(self.d.sum()) != self.x0.shape[0]:
            raise ValueError(f"{self.id}: sum(d)={int(self.d.sum())} != frames={self.x0.shape[0]}")
        if not len(self.tokens) == len(self.d) == len(self.p) == len(self.e):
            raise ValueError(f"{self.id}: per-token arrays differ in length")

    @property
    def frames(self) -> int:
        return self.x0.shape[0]


@dataclass
class Corpus:
    spec: CorpusSpec
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def manifest(self) -> list[dict]:
        records, offset = [], 0
        for u in self.utterances:
            records.append({
                "id": u.id, "speaker": int(u.speaker), "tokens": u.tokens.tolist(),
                "d": u.d.tolist(), "p": u.p.tolist(), "e": u.e.tolist(),
                "frames": u.frames, "mel_bins": int(u.x0.shape[1]), "offset": offset,
            })
            offset += u.x0.size * 4
        return records

    def split(self, n_valid: int) -> tuple[list[Utterance], list[Utterance]]:
        """Last ``n_valid`` utterances held out."""
        n_valid = min(n_valid, len(self.utterances))
        cut = len(self.utterances) - n_valid
        return self.utterances[:cut], self.utterances[cut:]


def _smooth_curve(rng: np.random.Generator, k: np.ndarray, scale: float, terms: int = 3) -> np.ndarray:
    out = np.zeros_like(k)
    for j in range(1, terms + 1):
        out += rng.normal(0.0, scale / j) * np.cos(np.pi * j * k + rng.uniform(0, 2 * np.pi))
    return out


def frame_log_energy(x: np.ndarray) -> np.ndarray:
    """log L2 norm of linear amplitudes per frame."""
    return 0.5 * np.log(np.sum(np.exp(2.0 * x), axis=-1))


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    k = np.linspace(0.0, 1.0, spec.mel_bins)
    envelopes = np.stack([_smooth_curve(rng, k, 0.6) - 0.4 * k for _ in range(spec.n_speakers)])
    speaker_pitch = rng.uniform(-1.0, 1.0, size=spec.n_speakers)
    templates = np.stack([_smooth_curve(rng, k, 1.0, terms=5) for _ in range(spec.n_tokens)])
    token_pitch = rng.normal(0.0, 0.5, size=spec.n_tokens)
    token_dur = rng.integers(2, 7, size=spec.n_tokens)

    utterances = []
    for i in range(spec.n_utterances):
        spk = int(rng.integers(spec.n_speakers))
        toks, durs = [], []
        total = 0
        while total < spec.min_frames:
            tok = int(rng.integers(1, spec.n_tokens + 1))
            dur = int(np.clip(token_dur[tok - 1] + rng.integers(-1, 2), 1, 8))
            dur = min(dur, spec.max_frames - total)
            toks.append(tok)
            durs.append(dur)
            total += dur
        toks_a = np.asarray(toks, dtype=np.int64)
        d = np.asarray(durs, dtype=np.int64)
        p = token_pitch[toks_a - 1] + speaker_pitch[spk] + rng.normal(0.0, 0.2, size=len(toks_a))
        rows = []
        for tok, dur, pitch in zip(toks_a, d, p):
            center = 0.35 + 0.15 * pitch
            bump = 1.5 * np.exp(-0.5 * ((k - center) / 0.08) ** 2)
            frame = templates[tok - 1] + envelopes[spk] + bump - 1.0
            rows.append(np.repeat(frame[None, :], dur, axis=0))
        x = np.concatenate(rows, axis=0)
        x = x + rng.normal(0.0, spec.noise, size=x.shape)
        x = np.clip(x, -MEL_CLIP, MEL_CLIP).astype(np.float32).astype(np.float64)
        fe = frame_log_energy(x)
        bounds = np.concatenate([[0], np.cumsum(d)])
        e = np.array([fe[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
        utterances.append(Utterance(f"utt{i:05d}", spk, toks_a, x, d, p.astype(np.float64), e))
    return Corpus(spec, utterances)


def save_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / MELS, "wb") as fh:
            for u in corpus.utterances:
                fh.write(u.x0.astype("<f4").tobytes())
        with open(path / MANIFEST, "w", encoding="utf-8") as fh:
            for rec in corpus.manifest():
                fh.write(json.dumps(rec) + "\n")
        (path / SPEC).write_text(json.dumps(corpus.spec.__dict__, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write corpus to {path}: {exc}") from exc


def load_corpus(path: str | os.PathLike) -> Corpus:
    path = Path(path)
    try:
        spec = CorpusSpec(**json.loads((path / SPEC).read_text(encoding="utf-8")))
        blob = (path / MELS).read_bytes()
        lines = (path / MANIFEST).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read corpus at {path}: {exc}") from exc
    utterances = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frames, bins, offset = int(rec["frames"]), int(rec["mel_bins"]), int(rec["offset"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path / MANIFEST}:{lineno}: corrupt manifest record: {exc}") from exc
        nbytes = frames * bins * 4
        if offset + nbytes > len(blob):
            raise CorpusError(
                f"{path / MELS}: truncated, record {rec.get('id')} (manifest line {lineno}) needs bytes "
                f"[{offset}, {offset + nbytes}) but file has {len(blob)}")
        x0 = np.frombuffer(blob, dtype="<f4", count=frames * bins, offset=offset)
        try:
            utterances.append(Utterance(
                id=rec["id"], speaker=int(rec["speaker"]),
                tokens=np.asarray(rec["tokens"], dtype=np.int64),
                x0=x0.astype(np.float64).reshape(frames, bins),
                d=np.asarray(rec["d"], dtype=np.int64),
                p=np.asarray(rec["p"], dtype=np.float64),
                e=np.asarray(rec["e"], dtype=np.float64)))
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"{path / MANIFEST}:{lineno}: invalid record: {exc}") from exc
    return Corpus(spec, utterances)


@dataclass
class Batch:
    """Zero-padded mini-batch; ``tokens`` uses id 0 as padding."""

    tokens: torch.Tensor  # [B, N] long
    token_lens: torch.Tensor  # [B]
    speakers: torch.Tensor  # [B]
    mels: torch.Tensor  # [B, F, M]
    mel_lens: torch.Tensor  # [B]
    durations: torch.Tensor  # [B, N] long
    pitch: torch.Tensor  # [B, N]
    energy: torch.Tensor  # [B, N]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_mask(self) -> torch.Tensor:
        return sequence_mask(self.token_lens, self.tokens.shape[1])

    @property
    def mel_mask(self) -> torch.Tensor:
        return sequence_mask(self.mel_lens, self.mels.shape[1])


def collate(utts: Sequence[Utterance]) -> Batch:
    if not utts:
        raise ValueError("cannot collate an empty batch")
    B = len(utts)
    N = max(len(u.tokens) for u in utts)
    F = max(u.frames for u in utts)
    M = utts[0].x0.shape[1]
    tokens = torch.zeros(B, N, dtype=torch.long)
    durations = torch.zeros(B, N, dtype=torch.long)
    pitch = torch.zeros(B, N, dtype=DTYPE)
    energy = torch.zeros(B, N, dtype=DTYPE)
    mels = torch.zeros(B, F, M, dtype=DTYPE)
    for i, u in enumerate(utts):
        n = len(u.tokens)
        tokens[i, :n] = torch.from_numpy(u.tokens)
        durations[i, :n] = torch.from_numpy(u.d)
        pitch[i, :n] = torch.from_numpy(u.p)
        energy[i, :n] = torch.from_numpy(u.e)
        mels[i, :u.frames] = torch.from_numpy(u.x0)
    return Batch(
        tokens=tokens,
        token_lens=torch.tensor([len(u.tokens) for u in utts]),
        speakers=torch.tensor([u.speaker for u in utts]),
        mels=mels,
        mel_lens=torch.tensor([u.frames for u in utts]),
        durations=durations, pitch=pitch, energy=energy)


def speaker_mean_frames(utts: Sequence[Utterance], n_speakers: int) -> np.ndarray:
    """Average log-mel frame per speaker (used by the constant baseline)."""
    bins = utts[0].x0.shape[1]
    sums = np.zeros((n_speakers, bins))
    counts = np.zeros(n_speakers)
    for u in utts:
        sums[u.speaker] += u.x0.sum(axis=0)
        counts[u.speaker] += u.frames
    overall = sums.sum(axis=0) / max(counts.sum(), 1)
    return np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], overall)
