"""Uphill-aligned feature extraction.

For every pixel, find the highest-elevation neighbor on an annular ring at
each metric range and sample selected feature channels at those points. The
rings have half-pixel width; offsets are visited clockwise from north, which
fixes tie-breaking deterministically. Results are invariant to adding a
constant to the DEM or applying any strictly increasing transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .raster import FeatureStack, Raster

DEFAULT_RANGES_M = (30.0, 100.0, 300.0)
DEFAULT_WEIGHT_THRESHOLD = 0.2


@dataclass(frozen=True)
class AlignmentConfig:
    """Looking distances in meters plus the base channels to gather."""

    ranges_m: tuple[float, ...] = DEFAULT_RANGES_M
    selected_channels: tuple[int, ...] = ()
    weight_threshold: float = DEFAULT_WEIGHT_THRESHOLD

    def __post_init__(self):
        if not self.ranges_m or any(r <= 0 for r in self.ranges_m):
            raise DataError(f"ranges must be strictly positive, got {self.ranges_m}")
        if any(b <= a for a, b in zip(self.ranges_m, self.ranges_m[1:])):
            raise DataError(f"ranges must be strictly increasing, got {self.ranges_m}")
        if not self.selected_channels:
            raise DataError("selected_channels must be non-empty")


@dataclass(frozen=True)
class RingOffsets:
    """Integer displacements whose length rounds to the ring radius.

    Offsets are ordered by angle clockwise from north (up in row/col space),
    so the first entry of a constant-elevation ring is due north.
    """

    radius_px: float
    offsets: tuple[tuple[int, int], ...] = field(default_factory=tuple)


def ring_offsets(radius_px: float) -> RingOffsets:
    """All integer (drow, dcol) with euclidean length in [r - 0.5, r + 0.5)."""
    if radius_px < 0:
        raise DataError(f"radius must be >= 0, got {radius_px}")
    reach = int(math.floor(radius_px + 0.5))
    lo, hi = radius_px - 0.5, radius_px + 0.5
    found: list[tuple[float, int, int]] = []
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            length = math.hypot(dr, dc)
            if lo <= length < hi:
                # angle clockwise from north: north=0, east=pi/2, south=pi, west=3pi/2
                angle = math.atan2(dc, -dr) % (2 * math.pi)
                found.append((angle, dr, dc))
    found.sort()
    return RingOffsets(radius_px, tuple((dr, dc) for _, dr, dc in found))


def find_uphill(dem: Raster, pixel: tuple[int, int], ring: RingOffsets) -> tuple[int, int]:
    """Highest-elevation valid ring neighbor of ``pixel``; ties keep the
    earliest offset in ring order. Falls back to the pixel itself when no
    ring neighbor is valid and in bounds."""
    r, c = pixel
    rows, cols = dem.georef.shape
    if not (0 <= r < rows and 0 <= c < cols):
        raise DataError(f"pixel {pixel} out of bounds for {rows}x{cols} grid")
    if not dem.valid[r, c]:
        raise DataError(f"pixel {pixel} is invalid in the DEM")
    best: tuple[int, int] | None = None
    best_elev = -math.inf
    for dr, dc in ring.offsets:
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols and dem.valid[rr, cc]:
            elev = dem.values[rr, cc]
            if elev > best_elev:
                best_elev = elev
                best = (rr, cc)
    return best if best is not None else (r, c)


def uphill_offsets(dem: Raster, ring: RingOffsets) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``find_uphill`` over the whole grid.

    Returns per-pixel (drow, dcol) int arrays; invalid center pixels get
    (0, 0). Identical to looping ``find_uphill`` because offsets are scanned
    in ring order with a strict improvement test.
    """
    rows, cols = dem.georef.shape
    reach = int(math.floor(ring.radius_px + 0.5))
    pad_shape = (rows + 2 * reach, cols + 2 * reach)
    elev_pad = np.full(pad_shape, -np.inf, dtype=np.float64)
    elev_pad[reach : reach + rows, reach : reach + cols] = np.where(
        dem.valid, dem.values, -np.inf
    )

    best_elev = np.full((rows, cols), -np.inf, dtype=np.float64)
    best_dr = np.zeros((rows, cols), dtype=np.int32)
    best_dc = np.zeros((rows, cols), dtype=np.int32)
    for dr, dc in ring.offsets:
        cand = elev_pad[reach + dr : reach + dr + rows, reach + dc : reach + dc + cols]
        better = cand > best_elev
        if better.any():
            best_elev = np.where(better, cand, best_elev)
            best_dr[better] = dr
            best_dc[better] = dc
    # centers whose entire ring is invalid/out of bounds fall back to themselves
    none_found = np.isinf(best_elev)
    best_dr[none_found] = 0
    best_dc[none_found] = 0
    return best_dr, best_dc


def select_aligned_channels(llr_weights: np.ndarray, threshold: float) -> list[int]:
    """Channel indices whose absolute trained linear-model weight reaches
    the threshold, in canonical channel order."""
    if threshold <= 0:
        raise DataError(f"threshold must be > 0, got {threshold}")
    weights = np.asarray(llr_weights, dtype=np.float64).ravel()
    picked = [i for i, w in enumerate(weights) if abs(w) >= threshold]
    if not picked:
        raise DataError(
            f"no channel has |weight| >= {threshold}; lower the threshold"
        )
    return picked


def align_features(stack: FeatureStack, dem: Raster, config: AlignmentConfig) -> FeatureStack:
    """Gather selected channels at each range's uphill point.

    Output channel order is range-major: all selected channels at the first
    range, then the second, and so on; names are ``<base>@<range>m``. The
    output mask is the conjunction of the center pixel's DEM validity and the
    sampled cell's validity in the source channel; masked outputs are zeroed.
    """
    if stack.georef != dem.georef:
        raise DataError("stack and DEM GeoRef mismatch")
    n_ch = stack.num_channels
    for k in config.selected_channels:
        if not (0 <= k < n_ch):
            raise DataError(f"selected channel {k} out of range for {n_ch}-channel stack")

    rows, cols = stack.georef.shape
    row_idx, col_idx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    n_sel = len(config.selected_channels)
    out_values = np.zeros((n_sel * len(config.ranges_m), rows, cols), dtype=np.float32)
    out_valid = np.zeros_like(out_values, dtype=bool)
    names: list[str] = []

    for ri, range_m in enumerate(config.ranges_m):
        ring = ring_offsets(range_m / stack.georef.pixel_size)
        dr, dc = uphill_offsets(dem, ring)
        rr = row_idx + dr
        cc = col_idx + dc
        for ki, k in enumerate(config.selected_channels):
            idx = ri * n_sel + ki
            sampled = stack.values[k][rr, cc]
            mask = dem.valid & stack.valid[k][rr, cc]
            out_values[idx] = np.where(mask, sampled, 0.0)
            out_valid[idx] = mask
            names.append(f"{stack.channel_names[k]}@{range_m:g}m")

    return FeatureStack(stack.georef, out_values, out_valid, names)
