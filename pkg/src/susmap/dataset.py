"""Patch tiling, train/val/test splitting, and positive-patch oversampling.

A patch is a core window (nominally 500x500, clipped at the far edges of the
extent) plus a fixed-size padded read window that extends the nominal core by
64 pixels on each side. Reads outside the extent yield invalid, zero-filled
cells; padding exists to supply convolution context only and is never counted
in losses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .raster import FeatureStack, GeoRef, Raster

DEFAULT_CORE = 500
DEFAULT_PAD = 64
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Patch:
    """One tile of the extent.

    ``core_window`` is the clipped (row0, col0, rows, cols) this patch owns;
    ``padded_window`` is the fixed-size read window (nominal core plus pad on
    every side), which may extend beyond the extent.
    """

    index: int
    core_window: tuple[int, int, int, int]
    padded_window: tuple[int, int, int, int]
    split: str | None = None
    has_positive: bool | None = None

    @property
    def core_offset(self) -> tuple[int, int]:
        """Core origin relative to the padded window."""
        return (self.core_window[0] - self.padded_window[0],
                self.core_window[1] - self.padded_window[1])


def make_patch_grid(georef: GeoRef, core: int = DEFAULT_CORE, pad: int = DEFAULT_PAD) -> list[Patch]:
    """Tile the extent into ceil(rows/core) x ceil(cols/core) disjoint cores."""
    if core <= 0:
        raise DataError(f"core must be > 0, got {core}")
    if pad < 0:
        raise DataError(f"pad must be >= 0, got {pad}")
    rows, cols = georef.shape
    patches = []
    index = 0
    for r0 in range(0, rows, core):
        for c0 in range(0, cols, core):
            core_h = min(core, rows - r0)
            core_w = min(core, cols - c0)
            padded = (r0 - pad, c0 - pad, core + 2 * pad, core + 2 * pad)
            patches.append(Patch(index, (r0, c0, core_h, core_w), padded))
            index += 1
    return patches


def split_patches(
    patches: list[Patch],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> list[Patch]:
    """Random train/val/test partition, deterministic under the seed.

    Counts follow the largest-remainder rule, so 100 patches at (0.8, 0.1,
    0.1) give exactly 80/10/10.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions}")
    n = len(patches)
    exact = [f * n for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for i in sorted(range(3), key=lambda i: (-remainders[i], i))[: n - sum(counts)]:
        counts[i] += 1

    order = np.random.default_rng(seed).permutation(n)
    assignment: dict[int, str] = {}
    pos = 0
    for split, count in zip(SPLITS, counts):
        for j in order[pos : pos + count]:
            assignment[patches[j].index] = split
        pos += count
    return [replace(p, split=assignment[p.index]) for p in patches]


def mark_positives(patches: list[Patch], labels: Raster) -> list[Patch]:
    """Set ``has_positive``: any valid label-1 cell inside the core window."""
    out = []
    for p in patches:
        r0, c0, h, w = p.core_window
        window_labels = labels.values[r0 : r0 + h, c0 : c0 + w]
        window_valid = labels.valid[r0 : r0 + h, c0 : c0 + w]
        out.append(replace(p, has_positive=bool(np.any(window_valid & (window_labels > 0.5)))))
    return out


def oversample(train_patches: list[Patch], ratio: int = 5) -> list[Patch]:
    """Multiset in which every positive patch appears ``ratio`` times."""
    if ratio < 1:
        raise DataError(f"oversample ratio must be >= 1, got {ratio}")
    multiset: list[Patch] = []
    for p in train_patches:
        if p.has_positive is None:
            raise DataError("patches must be marked with mark_positives before oversampling")
        multiset.extend([p] * (ratio if p.has_positive else 1))
    return multiset


# ---------------------------------------------------------------------------
# Window reads
# ---------------------------------------------------------------------------


def read_window(
    values: np.ndarray, valid: np.ndarray, window: tuple[int, int, int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Read a (possibly out-of-extent) window; outside cells are invalid zeros.

    Works on 2D arrays or channel-major 3D arrays (window applies to the last
    two axes).
    """
    r0, c0, h, w = window
    rows, cols = values.shape[-2:]
    out_vals = np.zeros(values.shape[:-2] + (h, w), dtype=values.dtype)
    out_valid = np.zeros(valid.shape[:-2] + (h, w), dtype=bool)
    sr0, sc0 = max(r0, 0), max(c0, 0)
    sr1, sc1 = min(r0 + h, rows), min(c0 + w, cols)
    if sr0 < sr1 and sc0 < sc1:
        dst = (..., slice(sr0 - r0, sr1 - r0), slice(sc0 - c0, sc1 - c0))
        src = (..., slice(sr0, sr1), slice(sc0, sc1))
        out_vals[dst] = values[src]
        out_valid[dst] = valid[src]
    out_vals[~out_valid] = 0
    return out_vals, out_valid


def read_patch_input(stack: FeatureStack, patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """Padded-window read of all channels: (C, Hp, Wp) values and mask.

    Invalid cells are zero-filled so they can be fed to a network directly.
    """
    return read_window(stack.values, stack.valid, patch.padded_window)


def read_patch_labels(labels: Raster, patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """Labels and loss mask in padded-window coordinates.

    The mask is true only on valid label cells inside the core window, so
    losses never touch padding or invalid pixels.
    """
    vals, valid = read_window(labels.values, labels.valid, patch.padded_window)
    mask = np.zeros_like(valid)
    ro, co = patch.core_offset
    h, w = patch.core_window[2], patch.core_window[3]
    mask[ro : ro + h, co : co + w] = valid[ro : ro + h, co : co + w]
    return vals, mask


# ---------------------------------------------------------------------------
# Split manifest
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = (
    "patch_id", "core_row0", "core_col0", "core_rows", "core_cols",
    "pad_row0", "pad_col0", "pad_rows", "pad_cols", "split", "has_positive",
)


def save_manifest(path: str | Path, patches: list[Patch]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_FIELDS)
        for p in patches:
            writer.writerow(
                (p.index, *p.core_window, *p.padded_window,
                 p.split or "", int(bool(p.has_positive)))
            )


def load_manifest(path: str | Path) -> list[Patch]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split manifest not found: {path}")
    patches = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(_MANIFEST_FIELDS):
            raise DataError(f"unexpected manifest columns in {path}: {reader.fieldnames}")
        for row in reader:
            patches.append(
                Patch(
                    index=int(row["patch_id"]),
                    core_window=tuple(int(row[k]) for k in
                                      ("core_row0", "core_col0", "core_rows", "core_cols")),
                    padded_window=tuple(int(row[k]) for k in
                                        ("pad_row0", "pad_col0", "pad_rows", "pad_cols")),
                    split=row["split"] or None,
                    has_positive=bool(int(row["has_positive"])),
                )
            )
    return patches


def split_subset(patches: list[Patch], split: str) -> list[Patch]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    subset = [p for p in patches if p.split == split]
    if not subset:
        raise DataError(f"split {split!r} is empty")
    return subset
