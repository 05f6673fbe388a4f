"""Matplotlib figures rendered next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curve_figure(trace, path) -> Path:
    """Total, prediction, and coarse loss against iterations."""
    path = Path(path)
    iters = [row.iteration for row in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iters, [row.loss_total for row in trace], label="total", lw=1.5)
    ax.plot(iters, [row.loss_final for row in trace], label="prediction", lw=1.0)
    if any(row.loss_coarse for row in trace):
        ax.plot(iters, [row.loss_coarse for row in trace], label="coarse", lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def convergence_figure(report, path) -> Path:
    """Prediction-loss curves per seed, one color per variant."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {"cmpe": "tab:blue", "baseline": "tab:orange"}
    seen = set()
    for (variant, seed), trace in report.traces.items():
        label = None if variant in seen else variant
        seen.add(variant)
        ax.plot([r.iteration for r in trace], [r.loss_final for r in trace],
                color=colors.get(variant, "gray"), alpha=0.6, lw=1.0, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("prediction loss")
    ax.set_title(f"median iters to {report.tau_fraction:.0%} of start: "
                 f"{report.median_with:.0f} with prior vs {report.median_without:.0f} without")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def miou_bar_figure(results: dict[str, dict[str, float | None]], path) -> Path:
    """Seen/unseen/mean bars per condition."""
    path = Path(path)
    conditions = list(results)
    splits = ["seen", "unseen", "mean"]
    x = np.arange(len(conditions))
    width = 0.25
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, split in enumerate(splits):
        values = [results[c].get(split) or 0.0 for c in conditions]
        ax.bar(x + (i - 1) * width, values, width, label=split)
    ax.set_xticks(x, conditions)
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def attention_figure(weights: np.ndarray, class_names: list[str], path) -> Path:
    """Per-class spatial-weight heatmaps for one image."""
    path = Path(path)
    k = weights.shape[0]
    cols = min(k, 4)
    rows = (k + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows),
                             squeeze=False)
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        if idx < k:
            ax.imshow(weights[idx], cmap="viridis")
            ax.set_title(class_names[idx], fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
