"""Matplotlib figure rendering for the report paths (headless, file output)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def save_loss_curve(trace, path) -> Path:
    """Per-epoch mean training loss on a log scale."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = range(1, len(trace) + 1)
    ax.plot(epochs, list(trace), marker="o", markersize=3, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    if all(v > 0 for v in trace):
        ax.set_yscale("log")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.savefig(p, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return p


def save_ablation_figure(report, path) -> Path:
    """Per-seed PCK scatter with median bars, one column per configuration."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    order = report.sorted_configs()
    medians = report.medians()

    fig, ax = plt.subplots(figsize=(7, 4))
    for i, label in enumerate(order):
        vals = report.config_pcks(label)
        ax.scatter([i] * len(vals), vals, s=24, alpha=0.7, zorder=3)
        med = medians[label]
        if not math.isnan(med):
            ax.hlines(med, i - 0.25, i + 0.25, colors="k", linewidth=1.5, zorder=4)
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels(order, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(f"held-out PCK@{report.alpha:g}")
    ax.set_ylim(0.0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.savefig(p, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return p
