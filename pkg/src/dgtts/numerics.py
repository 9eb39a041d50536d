"""Tensor plumbing: precision policy, determinism, gradient checking and the
named-tensor file format used by checkpoints and inference outputs.

Reverse-mode differentiation itself is delegated to ``torch.autograd``; this
module owns everything around it that the rest of the package relies on.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

DTYPE = torch.float64

MAGIC = b"DGTT"
FORMAT_VERSION = 1
HEADER_NAME = "__header__"


class TensorFormatError(ValueError):
    """Raised when a named-tensor file is malformed or truncated."""


def set_deterministic(seed: int | None = None) -> None:
    """Pin torch to one thread and deterministic kernels, optionally seeding."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.set_default_dtype(DTYPE)
    if seed is not None:
        torch.manual_seed(seed)


def as_tensor(x, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_error:.3e} "
                f"(tol {self.tolerance:.0e}, worst {worst}, "
                f"{len(self.errors)} tensors, {sum(self.checked.values())} coords)")


# central differences with step 1e-5 carry ~1e-10 noise; below this norm a
# gradient counts as zero
ZERO_GRAD_FLOOR = 1e-7


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < ZERO_GRAD_FLOOR:
        # both gradients vanish up to difference noise; use absolute error
        return diff
    return diff / scale


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central differences for each tensor.

    ``loss_fn`` must be a closure that re-evaluates a scalar loss from the
    current values of ``params`` (all float64, ``requires_grad``). When
    ``max_coords`` is given, only that many randomly chosen coordinates of a
    tensor are perturbed; the analytic gradient is restricted to the same
    coordinates.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    for n, p in zip(names, tensors):
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 tensors, {n} is {p.dtype}")
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            analytic_full = (torch.zeros_like(p) if g is None else g).reshape(-1).numpy()
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            numeric = np.empty(len(coords))
            for k, i in enumerate(coords):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * step)
            report.errors[name] = _relative_error(analytic_full[coords], numeric)
            report.checked[name] = len(coords)
    return report


def grad_check_module(
    module: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    extra: Mapping[str, torch.Tensor] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Gradient-check every trainable parameter of ``module`` (plus ``extra``)."""
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    if extra:
        params.update(extra)
    return grad_check(loss_fn, params, tolerance=tolerance, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# named-tensor files
# ---------------------------------------------------------------------------


def encode_header(meta: Mapping[str, object]) -> torch.Tensor:
    """Pack ``key=value`` lines into a byte-valued tensor (exact in float32)."""
    text = "".join(f"{k}={v}\n" for k, v in meta.items())
    return torch.tensor(list(text.encode("utf-8")), dtype=DTYPE)


def decode_header(t: torch.Tensor) -> dict[str, str]:
    raw = bytes(int(v) for v in t.tolist()).decode("utf-8")
    meta = {}
    for line in raw.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def dumps_tensors(tensors: Mapping[str, torch.Tensor], meta: Mapping[str, object] | None = None) -> bytes:
    items = dict(tensors)
    if meta is not None:
        items = {HEADER_NAME: encode_header(meta), **items}
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, t in items.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        t = t.detach()
        if t.dim() > 255:
            raise ValueError(f"rank too large for {name}")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.cpu().numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def loads_tensors(buf: bytes) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    def take(pos: int, size: int, what: str) -> bytes:
        if pos + size > len(buf):
            raise TensorFormatError(
                f"truncated file: need {size} bytes for {what} at offset {pos}, have {len(buf) - pos}")
        return buf[pos:pos + size]

    if take(0, 4, "magic") != MAGIC:
        raise TensorFormatError("bad magic bytes, not a DGTT tensor file")
    version, count = struct.unpack("<II", take(4, 8, "version/count"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    pos = 12
    tensors: dict[str, torch.Tensor] = {}
    meta: dict[str, str] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(pos, 2, "name length"))
        pos += 2
        name = take(pos, nlen, "name").decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack("<B", take(pos, 1, f"rank of {name}"))
        pos += 1
        dims = struct.unpack(f"<{rank}I", take(pos, 4 * rank, f"dims of {name}"))
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        payload = take(pos, 4 * n, f"payload of {name}")
        pos += 4 * n
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        t = torch.from_numpy(arr.copy())
        if name == HEADER_NAME:
            meta = decode_header(t)
        else:
            tensors[name] = t
    if pos != len(buf):
        raise TensorFormatError(f"{len(buf) - pos} trailing bytes after offset {pos}")
    return tensors, meta


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor],
                 meta: Mapping[str, object] | None = None) -> None:
    """Atomically write a named-tensor file (temp file, then rename)."""
    path = Path(path)
    data = dumps_tensors(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc}") from exc
    try:
        return loads_tensors(buf)
    except TensorFormatError as exc:
        raise TensorFormatError(f"{path}: {exc}") from exc


def state_fingerprint(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over names and float64 bytes, for freeze/determinism checks."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().to(torch.float64).numpy().tobytes())
    return h.hexdigest()
