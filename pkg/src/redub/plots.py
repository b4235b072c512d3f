"""Figure rendering for training logs, metric reports, and curation scores.

Everything draws through the Agg backend and writes straight to files, so
plotting works on headless machines and never pops a window.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def save_loss_curve(
    rows: Sequence[tuple[int, float, float]], path: str, smooth: int = 25
) -> str:
    """Loss over steps (log y) with a running mean; returns the path."""
    steps = np.array([r[0] for r in rows])
    losses = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.6, alpha=0.35, label="loss")
    if len(losses) >= smooth > 1:
        kernel = np.ones(smooth) / smooth
        ax.plot(
            steps[smooth - 1 :],
            np.convolve(losses, kernel, mode="valid"),
            lw=1.6,
            label=f"mean over {smooth}",
        )
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_bars(report, out_dir: str) -> list[str]:
    """One bar chart per metric across videos, plus the aggregate line."""
    os.makedirs(out_dir, exist_ok=True)
    agg = report.aggregate()
    paths = []
    ids = [vid for vid, _ in report.rows]
    for name in report.metric_names:
        values = [vals[name] for _, vals in report.rows]
        fig, ax = plt.subplots(figsize=(max(5, 0.45 * len(ids) + 2), 4))
        ax.bar(range(len(ids)), values, color="#4878a8")
        mean, stderr = agg[name]
        ax.axhline(mean, color="#b04030", lw=1.2, label=f"mean {mean:.4f} +/- {stderr:.4f}")
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel(name)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"metric_{name}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def save_score_histogram(
    scores: Sequence[float],
    path: str,
    title: str,
    threshold: Optional[float] = None,
    bins: int = 30,
) -> str:
    """Histogram of curation scores with the accept threshold marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(scores), bins=bins, color="#4878a8", edgecolor="white")
    if threshold is not None:
        ax.axvline(threshold, color="#b04030", lw=1.4, label=f"threshold {threshold:g}")
        ax.legend(loc="best")
    ax.set_title(title)
    ax.set_xlabel("score")
    ax.set_ylabel("videos")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_aperture_traces(
    commanded: np.ndarray,
    measured: np.ndarray,
    path: str,
    title: str = "mouth opening",
) -> str:
    """Commanded vs measured per-frame apertures for one clip."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(commanded, lw=1.5, label="commanded")
    ax.plot(measured, lw=1.5, ls="--", label="measured")
    ax.set_xlabel("frame")
    ax.set_ylabel("aperture")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
