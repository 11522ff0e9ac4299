"""Evaluation: NLL metric, ROC curves, full-map stitched prediction.

``predict_full`` mosaics windowed inference into a whole-extent probability
map. Window origins are snapped down to multiples of 2**depth so the pooling
grids inside every window coincide with the grids a whole-image pass would
use, and windows are clipped to the extent so border zero-padding matches
too. With padding at least the receptive-field radius the harvested cores
are then equal to single-pass inference and the stitched map has no seams.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Patch, make_patch_grid, read_patch_input, read_patch_labels
from .engine import LOSS_CLAMP, masked_bce_loss
from .errors import DataError
from .models import Model, PYRAMID_KINDS, receptive_field
from .raster import FeatureStack, Raster

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def nll_metric(predictions: np.ndarray, labels: np.ndarray,
               mask: np.ndarray | None = None) -> float:
    """Mean Bernoulli NLL over mask-true cells (same formula as the loss)."""
    predictions = np.asarray(predictions)
    if mask is None:
        mask = np.ones(predictions.shape, dtype=bool)
    return masked_bce_loss(predictions, np.asarray(labels), mask)


def nll_from_scores(scores: np.ndarray, targets: np.ndarray) -> float:
    """NLL of already-flattened probability scores."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise DataError("cannot compute NLL of zero scores")
    terms = t * np.log(np.maximum(s, LOSS_CLAMP)) + (1.0 - t) * np.log(
        np.maximum(1.0 - s, LOSS_CLAMP))
    return float(-terms.mean())


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_curve(scores: np.ndarray, labels: np.ndarray,
              mask: np.ndarray | None = None) -> RocCurve:
    """ROC over all distinct score thresholds, AUC by trapezoidal rule.

    Tied scores share one operating point, which makes the trapezoidal AUC
    equal to the pairwise estimator that credits ties as one half. The curve
    starts at (0, 0) with an unattainable sentinel threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(labels)
    if s.shape != t.shape:
        raise DataError(f"scores/labels shape mismatch: {s.shape} vs {t.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != s.shape:
            raise DataError(f"mask shape {m.shape} does not match scores {s.shape}")
        s, t = s[m], t[m]
    s = s.reshape(-1)
    t = t.reshape(-1).astype(np.float64) > 0.5
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"ROC needs both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thresholds, float(_trapezoid(tpr, fpr)))


def split_scores(
    model: Model, stack: FeatureStack, labels: Raster, patches: Sequence[Patch]
) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and binary targets at every masked core cell of `patches`."""
    scores, targets = [], []
    for patch in patches:
        vals, _ = read_patch_input(stack, patch)
        y, mask = read_patch_labels(labels, patch)
        probs = model.forward(vals[None].astype(model.dtype, copy=False))[0, 0]
        scores.append(probs[mask])
        targets.append(y[mask] > 0.5)
    if not scores:
        raise DataError("no patches given")
    return np.concatenate(scores), np.concatenate(targets)


def predict_full(
    model: Model,
    stack: FeatureStack,
    patches: Sequence[Patch] | None = None,
    *,
    core: int = 500,
    pad: int = 64,
) -> Raster:
    """Whole-extent probability map from a patch grid.

    Each patch is inferred on its (grid-aligned, extent-clipped) padded
    window and only the core is kept; cores must tile the extent exactly.
    Output cells are valid where every input channel is valid.
    """
    rows, cols = stack.georef.shape
    if patches is None:
        patches = make_patch_grid(stack.georef, core=core, pad=pad)
    radius = receptive_field(model.spec)
    block = 2 ** model.spec.depth if model.spec.kind in PYRAMID_KINDS else 1

    coverage = np.zeros((rows, cols), dtype=np.uint8)
    out = np.zeros((rows, cols), dtype=np.float32)
    for patch in patches:
        r0, c0, ch, cw = patch.core_window
        pr0, pc0, ph, pw = patch.padded_window
        if min(r0 - pr0, c0 - pc0) < radius:
            warnings.warn(
                f"patch padding {min(r0 - pr0, c0 - pc0)} is smaller than the "
                f"receptive-field radius {radius}; stitched outputs may show seams",
                stacklevel=2)
        # snap the window origin to the pooling grid, clip to the extent
        wr0 = max(0, (pr0 // block) * block)
        wc0 = max(0, (pc0 // block) * block)
        wr1 = min(rows, pr0 + ph)
        wc1 = min(cols, pc0 + pw)
        x = stack.values[None, :, wr0:wr1, wc0:wc1].astype(model.dtype, copy=False)
        probs = model.forward(x)[0, 0]
        out[r0 : r0 + ch, c0 : c0 + cw] = probs[
            r0 - wr0 : r0 - wr0 + ch, c0 - wc0 : c0 - wc0 + cw]
        coverage[r0 : r0 + ch, c0 : c0 + cw] += 1
    if not np.all(coverage == 1):
        raise DataError("patch cores must tile the extent exactly once")
    return Raster(stack.georef, out, np.all(stack.valid, axis=0))
