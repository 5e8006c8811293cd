"""Raster plot emission (no interactive display)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ROCResult  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_roc(roc: ROCResult, path: str | Path, *, label: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    name = f"{label} " if label else ""
    ax.plot(roc.fpr, roc.tpr, lw=1.8, label=f"{name}AUROC = {roc.auroc:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_roc_family(curves: Sequence[tuple[str, ROCResult]], path: str | Path) -> Path:
    """Several ROC curves on shared axes."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for label, roc in curves:
        ax.plot(roc.fpr, roc.tpr, lw=1.5, label=f"{label} ({roc.auroc:.3f})")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_ablation(axis: str, labels: Sequence[str], aurocs: Sequence[float],
                  path: str | Path) -> Path:
    """AUROC as a line over the swept values (numeric x when possible)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    try:
        xs = [float(v) for v in labels]
        ax.plot(xs, aurocs, marker="o", lw=1.5)
    except ValueError:
        xs = range(len(labels))
        ax.plot(xs, aurocs, marker="o", lw=1.5)
        ax.set_xticks(list(xs), labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("AUROC")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_losses(losses: Sequence[float], path: str | Path, *, ylabel: str = "loss") -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ax.plot(range(1, len(losses) + 1), losses, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    return _save(fig, path)
