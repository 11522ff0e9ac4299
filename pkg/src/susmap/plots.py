"""Figure rendering to files. Import keeps matplotlib on the Agg backend so
the CLI never needs a display."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import RocCurve
from .raster import Raster
from .training import TrainHistory


def save_heatmap(path: str | Path, raster: Raster, *, title: str | None = None,
                 vmin: float | None = None, vmax: float | None = None) -> None:
    """Render a raster as a turbo-colormap image; invalid cells stay blank."""
    data = np.ma.masked_where(~raster.valid, raster.values)
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(data, cmap="turbo", vmin=vmin, vmax=vmax, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title)
    ax.set_xlabel("col")
    ax.set_ylabel("row")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_roc_figure(path: str | Path, curves: Sequence[tuple[str, RocCurve]]) -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    for label, curve in curves:
        ax.plot(curve.fpr, curve.tpr, label=f"{label} (AUC {curve.auc:.3f})")
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8, label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_figure(path: str | Path, history: TrainHistory, *,
                        title: str | None = None) -> None:
    xs = [e.epoch for e in history.epochs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(xs, [e.train_nll for e in history.epochs], marker="o", label="train NLL")
    ax.plot(xs, [e.val_nll for e in history.epochs], marker="s", label="val NLL")
    if history.best_epoch >= 0:
        ax.axvline(history.best_epoch, color="gray", linestyle=":", linewidth=0.8,
                   label=f"best epoch {history.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
