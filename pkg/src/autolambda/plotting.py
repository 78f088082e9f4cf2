"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trajectory(log, path, title: str = "") -> Path:
    """Task weights and training losses against step."""
    path = Path(path)
    lam = log.lambda_array()
    tr = np.asarray(log.train_loss, dtype=np.float64)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for j, name in enumerate(log.names):
        ax1.plot(log.steps, lam[:, j], label=name)
        ax2.plot(log.steps, tr[:, j], label=name, lw=0.6)
    ax1.set_xlabel("step")
    ax1.set_ylabel("task weight")
    ax2.set_xlabel("step")
    ax2.set_ylabel("train loss")
    ax2.set_yscale("log")
    ax1.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_weight_comparison(logs: Dict[str, object], path, title: str = "") -> Path:
    """One panel per run, weights only; used for strategy and ablation comparisons."""
    path = Path(path)
    n = len(logs)
    fig, axes = plt.subplots(1, n, figsize=(3.6 * n, 3.2), squeeze=False)
    for ax, (label, log) in zip(axes[0], logs.items()):
        lam = log.lambda_array()
        for j, name in enumerate(log.names):
            ax.plot(log.steps, lam[:, j], label=name)
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("step")
    axes[0][0].set_ylabel("task weight")
    axes[0][0].legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_matrix(values: np.ndarray, names: Sequence[str], path, title: str = "") -> Path:
    """Heat map of a relationship matrix (row = primary task)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.2 + 0.7 * len(names), 1.0 + 0.6 * len(names)))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("weighted task")
    ax.set_ylabel("primary task")
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, f"{values[i, j]:.2f}", ha="center", va="center", color="w", fontsize=7)
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_bars(labels: Sequence[str], values: Sequence[float], path, ylabel: str = "", title: str = "") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(labels)), 3.2))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
