"""Figures for evaluation reports and ablation grids (written as PNG files)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import LabeledDataset  # noqa: E402
from .metrics import EvalReport, pr_points  # noqa: E402

# no timestamps or version strings in the files, so reruns are byte-stable
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_pr_curves(probs: np.ndarray, test: LabeledDataset, path, title: str = "") -> Path:
    """One precision-recall curve per class, coloured by class id."""
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("viridis", max(test.num_classes, 2))
    for c in range(test.num_classes):
        positives = test.labels == c
        if not positives.any():
            continue
        pts = np.array(pr_points(probs[:, c], positives))
        ax.plot(pts[:, 0], pts[:, 1], color=cmap(c), lw=1, alpha=0.8, label=str(c))
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title or "per-class precision-recall")
    if test.num_classes <= 20:
        ax.legend(fontsize=6, ncol=2, title="class", title_fontsize=7)
    return _save(fig, path)


def plot_ap_vs_count(report: EvalReport, path, baseline: EvalReport | None = None) -> Path:
    """Per-class AP against training-sample count (log scale)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    classes = sorted(report.ap)
    counts = [report.train_counts[c] for c in classes]
    ax.scatter(counts, [report.ap[c] for c in classes], label=f"ensemble (mAP {report.mAP:.3f})")
    if baseline is not None:
        ax.scatter(
            counts, [baseline.ap[c] for c in classes], marker="x", label=f"baseline (mAP {baseline.mAP:.3f})"
        )
    if counts and min(counts) > 0:
        ax.set_xscale("log")
    ax.set_xlabel("training samples")
    ax.set_ylabel("AP")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_grid_heatmap(grid, path) -> Path:
    """Mean mAP per (M, S) cell with the unmasked column on the right."""
    cols = [str(S) for S in grid.Ss] + ["off"]
    table = np.full((len(grid.Ms), len(cols)), math.nan)
    for i, M in enumerate(grid.Ms):
        for j, S in enumerate(grid.Ss):
            if (M, S) in grid.cells:
                table[i, j] = grid.mean(grid.cells[(M, S)])
        table[i, -1] = grid.mean(grid.cgc_off[M])
    fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 1.5, 0.9 * len(grid.Ms) + 1.2))
    im = ax.imshow(table, cmap="viridis", aspect="auto")
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            if not math.isnan(table[i, j]):
                ax.text(j, i, f"{table[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(grid.Ms)), [str(M) for M in grid.Ms])
    ax.set_xlabel("S (off = cgc off)")
    ax.set_ylabel("M")
    ax.set_title(f"mAP, baseline {grid.mean(grid.baseline):.3f}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)
