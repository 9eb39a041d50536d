"""Report figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import os
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    try:
        fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    except OSError as exc:
        raise OSError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def plot_bench(rows, path: str | os.PathLike) -> Path:
    """Wall time against token count, one line per mode."""
    series = defaultdict(list)
    for r in rows:
        series[r.mode].append((r.n_tokens, r.wall_time))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for mode, pts in series.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=mode)
        ax.set_xlabel("tokens")
        ax.set_ylabel("inference time (s)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_variation(energy: Sequence[np.ndarray], centroid: Sequence[np.ndarray],
                   path: str | os.PathLike) -> Path:
    """Per-sample energy and spectral-centroid contours, stacked."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.0, 4.0), sharex=True)
        for e, c in zip(energy, centroid):
            ax1.plot(e, lw=0.8, alpha=0.8)
            ax2.plot(c, lw=0.8, alpha=0.8)
        ax1.set_ylabel("frame log-energy")
        ax2.set_ylabel("spectral centroid (bin)")
        ax2.set_xlabel("frame")
        return _save(fig, path)


def plot_trace(trace, final: np.ndarray, path: str | os.PathLike) -> Path:
    """Intermediate ``x_t`` of the denoising chain followed by the output."""
    panels = [(f"t={t}", np.asarray(x)) for t, x in trace] + [("output", np.asarray(final))]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.2), squeeze=False)
        for ax, (title, x) in zip(axes[0], panels):
            ax.imshow(x.T, origin="lower", aspect="auto", cmap="magma")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def plot_schedule(schedule, path: str | os.PathLike) -> Path:
    """beta_t and alpha_bar_t against t."""
    t = np.arange(schedule.T + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.plot(t[1:], schedule.beta[1:].numpy(), marker="o", ms=3, label="beta")
        ax.plot(t, schedule.alpha_bar.numpy(), marker="s", ms=3, label="alpha_bar")
        ax.set_xlabel("t")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_losses(columns: Sequence[str], rows: Sequence[Sequence[float]], path: str | os.PathLike,
                keys: Sequence[str] = ("L_D", "L_adv", "L_mel")) -> Path:
    """Selected training-log columns against step."""
    idx = {c: i for i, c in enumerate(columns)}
    data = np.asarray(rows, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for k in keys:
            if k in idx:
                ax.plot(data[:, idx["step"]], data[:, idx[k]], lw=0.8, label=k)
        ax.set_xlabel("step")
        ax.legend(frameon=False)
        return _save(fig, path)
