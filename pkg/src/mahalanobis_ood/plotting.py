"""Report figures written straight to files (no pyplot state, no display needed)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from . import metrics
from .incremental import BiasSweepCurve

FIGSIZE = (4.5, 4.0)
DPI = 120


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    return path


def roc_figure(curves: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    """``curves`` maps a method name to ``(scores, is_positive)``."""
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    for name, (scores, labels) in curves.items():
        fpr, tpr, _ = metrics.roc_curve(scores, labels)
        ax.plot(fpr, tpr, label=f"{name} ({100 * metrics.auroc(scores, labels):.1f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def pr_figure(curves: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    """Precision-recall with in-distribution samples as positives."""
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    for name, (scores, labels) in curves.items():
        precision, recall, _ = metrics.precision_recall_curve(scores, labels)
        ax.step(recall, precision, where="post", label=name)
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower left", fontsize=8)
    return _save(fig, path)


def score_histogram(pos, neg, path, bins: int = 40, title: str | None = None) -> Path:
    pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
    edges = np.histogram_bin_edges(np.r_[pos, neg], bins=bins)
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    ax.hist(pos, bins=edges, alpha=0.6, label="in-distribution")
    ax.hist(neg, bins=edges, alpha=0.6, label="negative")
    ax.set(xlabel="score", ylabel="count")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path)


def sweep_figure(curves: dict[str, tuple[BiasSweepCurve, float]], path) -> Path:
    """Base-class accuracy against new-class accuracy for each metric."""
    fig = Figure(figsize=FIGSIZE)
    ax = fig.add_subplot()
    for name, (curve, auc) in curves.items():
        ax.plot(curve.new_accuracy, curve.base_accuracy, label=f"{name} (AUC {auc:.3f})")
    ax.set(xlabel="new-class accuracy", ylabel="base-class accuracy", xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(fontsize=8)
    return _save(fig, path)
