"""Model and training configuration, plus the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ: Any, key: str):
    raw = raw.strip()
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in ("tuple[int, ...]", "tuple[float, ...]"):
        conv = int if "int" in typ else float
        return tuple(conv(v) for v in raw.replace(" ", "").split(",") if v)
    if typ in ("str | None",) and raw.lower() in ("", "none"):
        return None
    return raw


def _coerce(cls, key: str, raw: str):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise KeyError(key)
    return _parse_value(raw, types[key], key)


def _dump(obj) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out[f.name] = str(v)
    return out


@dataclass
class ModelConfig:
    n_fft_blocks: int = 2
    hidden: int = 32
    n_heads: int = 2
    conv_kernel: int = 3
    conv_filter: int = 64
    n_wavenet_blocks: int = 4
    wavenet_hidden: int = 32
    mel_bins: int = 16
    n_speakers: int = 4
    n_tokens: int = 24
    T: int = 4
    preset: str = "tiny"
    n_mel_decoder_blocks: int = 2
    predictor_filter: int = 32
    predictor_kernel: int = 3
    disc_channels: tuple[int, ...] = (32, 64, 64, 32, 1)
    disc_kernels: tuple[int, ...] = (3, 5, 5, 5, 3)
    disc_strides: tuple[int, ...] = (1, 2, 2, 1, 1)
    latent_dim: int = 0

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if self.hidden % 2 or self.wavenet_hidden % 2:
            raise ConfigError("hidden sizes must be even for sinusoidal encodings")
        if not (len(self.disc_channels) == len(self.disc_kernels) == len(self.disc_strides) == 5):
            raise ConfigError("discriminator table needs exactly 5 conv layers")
        if self.preset not in ("paper", "tiny"):
            raise ConfigError(f"unknown preset {self.preset!r}")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(n_fft_blocks=4, hidden=256, n_heads=2, conv_kernel=9, conv_filter=1024,
                    n_wavenet_blocks=20, wavenet_hidden=256, mel_bins=80, n_mel_decoder_blocks=4,
                    predictor_filter=256, predictor_kernel=3,
                    disc_channels=(64, 128, 512, 128, 1), preset="paper")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return cls(**{"preset": "tiny", **overrides})

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ModelConfig":
        if preset == "paper":
            return cls.paper(**overrides)
        if preset == "tiny":
            return cls.tiny(**overrides)
        raise ConfigError(f"unknown preset {preset!r}")

    def to_meta(self, prefix: str = "model.") -> dict[str, str]:
        return {prefix + k: v for k, v in _dump(self).items()}

    @classmethod
    def from_meta(cls, meta: Mapping[str, str], prefix: str = "model.") -> "ModelConfig":
        kwargs = {}
        for key, raw in meta.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                kwargs[name] = _coerce(cls, name, raw)
        return cls(**kwargs)


@dataclass
class TrainConfig:
    T: int = 4
    beta_min: float = 0.1
    beta_max: float = 40.0
    batch_size: int = 8
    seed: int = 0
    steps: int = 1000
    g_lr: float = 1e-4
    d_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    lr_decay: float = 0.999
    decay_interval: int = 1000
    stage1_iters: int = 1000
    stage1_beta1: float = 0.9
    stage1_beta2: float = 0.98
    warmup: int = 4000
    stage1_objective: str = "diffused"
    lambda_d: float = 0.1
    lambda_p: float = 0.1
    lambda_e: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.decay_interval < 1:
            raise ConfigError("decay_interval must be >= 1")
        if self.stage1_objective not in ("diffused", "recon"):
            raise ConfigError(f"stage1_objective must be 'diffused' or 'recon', got {self.stage1_objective!r}")

    def to_meta(self, prefix: str = "train.") -> dict[str, str]:
        return {prefix + k: v for k, v in _dump(self).items()}

    @classmethod
    def from_meta(cls, meta: Mapping[str, str], prefix: str = "train.") -> "TrainConfig":
        kwargs = {}
        for key, raw in meta.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                kwargs[name] = _coerce(cls, name, raw)
        return cls(**kwargs)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines into ``{key: (value, line_number)}``.

    ``#`` starts a comment; dashes in keys are normalized to underscores.
    """
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = (value.strip(), lineno)
    return out


def read_config_file(path: str | Path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def build_config(cls, file_values: Mapping[str, tuple[str, int]], overrides: Mapping[str, Any],
                 source: str = "<config>", **base):
    """Resolve a dataclass from defaults < config file < explicit overrides.

    File keys that are not fields of ``cls`` are ignored so one file can feed
    several configs; ``overrides`` with ``None`` values count as unset.
    """
    names = {f.name for f in fields(cls)}
    kwargs = dict(base)
    for key, (raw, lineno) in file_values.items():
        if key not in names:
            continue
        try:
            kwargs[key] = _coerce(cls, key, raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    for key, value in overrides.items():
        if value is not None and key in names:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
