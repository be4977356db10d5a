"""PNG figures for training convergence and ROC curves.

Rendering uses the Agg backend with PNG metadata suppressed, so identical
inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .detector import RocPoint, auc  # noqa: E402
from .msdnn import TraceRow, smoothed  # noqa: E402

_PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_convergence(trace: Sequence[TraceRow], path: str | Path, title: str = "") -> Path:
    """Mini-batch accuracy and loss per iteration, with a 50-iteration moving mean."""
    it = [r.iteration for r in trace]
    acc = [r.accuracy for r in trace]
    loss = [r.loss for r in trace]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(it, acc, lw=0.6, color="tab:blue", alpha=0.5)
    ax2.plot(it, loss, lw=0.6, color="tab:red", alpha=0.5)
    sm_acc, sm_loss = smoothed(acc), smoothed(loss)
    if len(sm_acc) and len(sm_acc) < len(acc):
        offset = len(acc) - len(sm_acc)
        ax1.plot(it[offset:], sm_acc, lw=1.5, color="tab:blue")
        ax2.plot(it[offset:], sm_loss, lw=1.5, color="tab:red")
    ax1.set_ylabel("training accuracy")
    ax1.set_ylim(-0.02, 1.02)
    ax2.set_ylabel("cross-entropy loss")
    ax2.set_xlabel("iteration")
    ax1.grid(alpha=0.3)
    ax2.grid(alpha=0.3)
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_roc(points: Sequence[RocPoint], path: str | Path, title: str = "") -> Path:
    xy = sorted({(p.fpr, p.tpr) for p in points} | {(0.0, 0.0), (1.0, 1.0)})
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([a for a, _ in xy], [b for _, b in xy], lw=1.5, color="tab:blue",
            label=f"AUC = {auc(points):.3f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.01, 1.01)
    ax.set_ylim(-0.01, 1.01)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
