"""Objective metrics and inference benchmarking.

SSIM uses a 7x7 uniform window over fully contained windows. MCD and the
contour RMSE align frames with dynamic time warping over steps
``(1,0), (0,1), (1,1)``; among paths of minimal total cost the shortest wins.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)
N_CEPS = 24
SSIM_WINDOW = 7


@dataclass
class MetricReport:
    ssim: float
    mcd24: float
    rmse: float
    decoder_passes: int = 0
    wall_time_per_frame: float = 0.0

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim out of range: {self.ssim}")
        if self.mcd24 < 0:
            raise ValueError(f"negative MCD: {self.mcd24}")


def _as2d(x, name: str) -> np.ndarray:
    a = np.asarray(x.detach().cpu().numpy() if hasattr(x, "detach") else x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D [frames, bins], got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM with a uniform ``window x window`` window.

    The dynamic range ``R`` is ``max(a) - min(a)``; windows shrink to the
    input size when the input is smaller than the window.
    """
    a, b = _as2d(a, "a"), _as2d(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    R = float(a.max() - a.min())
    c1, c2 = (0.01 * R) ** 2, (0.03 * R) ** 2
    wh, ww = min(window, a.shape[0]), min(window, a.shape[1])
    pa = sliding_window_view(a, (wh, ww))
    pb = sliding_window_view(b, (wh, ww))
    mu_a = pa.mean(axis=(-1, -2))
    mu_b = pb.mean(axis=(-1, -2))
    var_a = pa.var(axis=(-1, -2))
    var_b = pb.var(axis=(-1, -2))
    cov = (pa * pb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    with np.errstate(invalid="ignore", divide="ignore"):
        local = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return float(np.clip(local.mean(), -1.0, 1.0))


def dtw(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimal-cost monotone contiguous alignment path from ``(0, 0)`` to
    ``(n-1, m-1)``. Costs accumulate from the start of the path, and ties
    are broken towards fewer steps."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ValueError("dtw: empty input")
    acc = np.full((n, m), np.inf)
    steps = np.zeros((n, m), dtype=np.int64)
    back = np.zeros((n, m, 2), dtype=np.int64)
    acc[0, 0] = cost[0, 0]
    steps[0, 0] = 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = None
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                key = (acc[pi, pj], steps[pi, pj])
                if best is None or key < best[0]:
                    best = (key, (pi, pj))
            (c, s), prev = best
            acc[i, j] = c + cost[i, j]
            steps[i, j] = s + 1
            back[i, j] = prev
    path = [(n - 1, m - 1)]
    while path[-1] != (0, 0):
        i, j = path[-1]
        path.append(tuple(int(v) for v in back[i, j]))
    path.reverse()
    return float(acc[n - 1, m - 1]), path


def cepstra(mel: np.ndarray, n_ceps: int = N_CEPS) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, coefficients ``1..n_ceps``."""
    c = dct(mel, type=2, norm="ortho", axis=-1)
    return c[:, 1:1 + min(n_ceps, mel.shape[1] - 1)]


def pairwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def mcd_dtw(a, b, n_ceps: int = N_CEPS) -> float:
    """Mel-cepstral distortion (dB) averaged along the DTW path."""
    a, b = _as2d(a, "a"), _as2d(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"mcd_dtw: bin counts differ ({a.shape[1]} vs {b.shape[1]})")
    cost = pairwise_euclidean(cepstra(a, n_ceps), cepstra(b, n_ceps))
    total, path = dtw(cost)
    return MCD_CONST * total / len(path)


def rmse_dtw(a, b) -> float:
    """Root mean squared difference of two 1-D contours along the DTW path
    (the path minimizes the summed squared difference)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("rmse_dtw: empty contour")
    total, path = dtw((a[:, None] - b[None, :]) ** 2)
    return math.sqrt(total / len(path))


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    mode: str
    n_tokens: int
    frames: int
    decoder_passes: int
    basic_passes: int
    wall_time: float

    @property
    def time_per_frame(self) -> float:
        return self.wall_time / max(self.frames, 1)


BENCH_COLUMNS = ["mode", "n_tokens", "frames", "decoder_passes", "basic_passes", "wall_time", "time_per_frame"]


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r.mode, r.n_tokens, r.frames, r.decoder_passes, r.basic_passes,
                    f"{r.wall_time:.6g}", f"{r.time_per_frame:.6g}"])
    return buf.getvalue()


def bench(runners: dict[str, Callable], requests: Sequence, repeats: int = 3) -> list[BenchRow]:
    """Time each mode on each request; keep the fastest of ``repeats``.

    ``runners`` maps a mode name to ``fn(request) -> (frames, decoder_passes,
    basic_passes)``.
    """
    rows = []
    for req in requests:
        for mode, fn in runners.items():
            best, info = math.inf, None
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                info = fn(req)
                best = min(best, time.perf_counter() - t0)
            frames, dp, bp = info
            rows.append(BenchRow(mode, len(req.tokens), frames, dp, bp, best))
    return rows


@dataclass
class GrowthFit:
    """Least-squares fit ``time = c0 + c1 L + c2 L^2`` with coefficient
    standard errors."""

    coef: np.ndarray
    stderr: np.ndarray
    linear_slope: float

    @property
    def slope_positive(self) -> bool:
        return self.linear_slope > 0

    @property
    def quadratic_t(self) -> float:
        return float(self.coef[2] / self.stderr[2]) if self.stderr[2] > 0 else math.inf

    def quadratic_negligible(self, z: float = 2.0) -> bool:
        """True when the quadratic coefficient is within ``z`` standard
        errors of zero."""
        return abs(self.quadratic_t) <= z


def fit_growth(lengths: Sequence[float], times: Sequence[float]) -> GrowthFit:
    L = np.asarray(lengths, dtype=np.float64)
    y = np.asarray(times, dtype=np.float64)
    if L.size < 4:
        raise ValueError("need at least 4 points to fit and test a quadratic term")
    X = np.stack([np.ones_like(L), L, L ** 2], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(L.size - 3, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    slope = float(np.polyfit(L, y, 1)[0])
    return GrowthFit(coef, np.sqrt(np.maximum(np.diag(cov), 0.0)), slope)
