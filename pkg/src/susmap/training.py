"""Patch-based training loop.

Epochs shuffle an oversampled multiset of training patches with a
per-epoch seeded generator, so a given (seed, epoch) pair always visits
patches in the same order. Losses are the masked Bernoulli NLL over core
cells only; validation runs on the un-oversampled val split, drives the
plateau scheduler, and the parameters from the best-validation epoch are
restored at the end.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Patch, oversample, read_patch_input, read_patch_labels, split_subset
from .engine import Optimizer, PlateauScheduler, bce_grad_wrt_logits, masked_bce_loss
from .errors import DataError
from .models import Model
from .raster import FeatureStack, Raster


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 8
    weight_decay: float = 0.001
    oversample_ratio: int = 5
    patience: int = 2
    lr_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.oversample_ratio < 1:
            raise DataError(f"oversample_ratio must be >= 1, got {self.oversample_ratio}")


@dataclass
class EpochStats:
    epoch: int
    train_nll: float
    val_nll: float
    lr: float
    wall_time_s: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = math.inf

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            # wall time stays out of the file so reruns are byte-identical
            writer.writerow(("epoch", "train_nll", "val_nll", "lr"))
            for e in self.epochs:
                writer.writerow((e.epoch, f"{e.train_nll:.9g}", f"{e.val_nll:.9g}",
                                 f"{e.lr:.9g}"))


def _batches(items: Sequence[Patch], batch_size: int) -> list[list[Patch]]:
    return [list(items[i : i + batch_size]) for i in range(0, len(items), batch_size)]


def _load_batch(stack: FeatureStack, labels: Raster, batch: Sequence[Patch], dtype):
    xs, ys, ms = [], [], []
    for p in batch:
        vals, _ = read_patch_input(stack, p)
        y, mask = read_patch_labels(labels, p)
        xs.append(vals)
        ys.append(y[None])
        ms.append(mask[None])
    x = np.stack(xs).astype(dtype, copy=False)
    y = np.stack(ys).astype(dtype, copy=False)
    mask = np.stack(ms)
    return x, y, mask


def _pooled_nll(model: Model, stack: FeatureStack, labels: Raster,
                patches: Sequence[Patch], batch_size: int) -> float:
    """Mean NLL over every masked cell of the given patches (forward only)."""
    total, count = 0.0, 0
    for batch in _batches(patches, batch_size):
        x, y, mask = _load_batch(stack, labels, batch, model.dtype)
        n = int(mask.sum())
        if n == 0:
            continue
        probs = model.forward(x)
        total += masked_bce_loss(probs, y, mask) * n
        count += n
    if count == 0:
        raise DataError("no valid label cells in the given patches")
    return total / count


def evaluate_nll(model: Model, stack: FeatureStack, labels: Raster,
                 patches: Sequence[Patch], batch_size: int = 8) -> float:
    return _pooled_nll(model, stack, labels, patches, batch_size)


def base_rate(labels: Raster, patches: Sequence[Patch]) -> float:
    """Fraction of positive cells among the masked core cells of `patches`."""
    total, count = 0.0, 0
    for p in patches:
        y, mask = read_patch_labels(labels, p)
        total += float(y[mask].sum())
        count += int(mask.sum())
    if count == 0:
        raise DataError("no valid label cells in the given patches")
    return total / count


def train(
    model: Model,
    stack: FeatureStack,
    labels: Raster,
    patches: Sequence[Patch],
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[TrainHistory, Optimizer]:
    """Train in place; returns the history and the optimizer (for checkpoints).

    The model is left holding the parameters of its best-validation epoch.
    """
    train_base = split_subset(list(patches), "train")
    val_patches = split_subset(list(patches), "val")
    train_multiset = oversample(train_base, config.oversample_ratio)

    optimizer = Optimizer(config.optimizer, config.lr, weight_decay=config.weight_decay)
    scheduler = PlateauScheduler(config.lr, patience=config.patience, factor=config.lr_factor)
    params = model.parameters()
    history = TrainHistory()
    best_state: dict[str, np.ndarray] | None = None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_multiset))
        shuffled = [train_multiset[i] for i in order]

        total, count = 0.0, 0
        for batch in _batches(shuffled, config.batch_size):
            x, y, mask = _load_batch(stack, labels, batch, model.dtype)
            n = int(mask.sum())
            if n == 0:
                continue
            probs = model.forward(x)
            total += masked_bce_loss(probs, y, mask) * n
            count += n
            model.zero_grad()
            model.backward_from_logits(bce_grad_wrt_logits(probs, y, mask))
            optimizer.step(params)
        if count == 0:
            raise DataError("training split has no valid label cells")
        train_nll = total / count

        val_nll = _pooled_nll(model, stack, labels, val_patches, config.batch_size)
        if val_nll < history.best_val_nll:
            history.best_val_nll = val_nll
            history.best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in params}
        optimizer.lr = scheduler.update(val_nll)

        stats = EpochStats(epoch, train_nll, val_nll, optimizer.lr, time.perf_counter() - t0)
        history.epochs.append(stats)
        if log is not None:
            log(f"epoch {epoch}: train_nll={train_nll:.5f} val_nll={val_nll:.5f} "
                f"lr={optimizer.lr:g} ({stats.wall_time_s:.1f}s)")

    if best_state is not None:
        for name, p in params:
            p.data[...] = best_state[name]
    return history, optimizer
