"""Self-contained test worlds with a planted uphill dependence.

A world is a smooth hilly DEM, its slope, and one smoothed categorical
lithology layer. Labels are planted so the event probability depends on the
local slope and on whether the rock *uphill* of the cell (at a fixed looking
distance) belongs to a designated weak class. A model that only sees local
channels cannot explain the second term, which is what makes these worlds
discriminate aligned from unaligned feature sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .alignment import ring_offsets, uphill_offsets
from .engine import sigmoid
from .errors import DataError
from .raster import CategoricalRaster, FeatureStack, GeoRef, Raster, build_feature_stack


@dataclass(frozen=True)
class WorldConfig:
    rows: int = 512
    cols: int = 512
    pixel_size: float = 10.0
    seed: int = 0
    num_hills: int = 6
    relief_m: float = 600.0
    noise_m: float = 1.5
    num_classes: int = 5
    class_smooth_px: float = 8.0
    weak_class: int = 0
    label_range_m: float = 100.0
    label_slope_gain: float = 3.0   # a: local slope weight
    label_weak_gain: float = 4.0    # b: uphill weak-rock weight
    label_bias: float = 8.0         # c

    def __post_init__(self):
        if self.rows < 64 or self.cols < 64:
            raise DataError(f"world must be at least 64x64, got {self.rows}x{self.cols}")
        if self.num_hills < 0 or self.noise_m < 0:
            raise DataError("num_hills and noise_m must be >= 0")
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")
        if not 0 <= self.weak_class < self.num_classes:
            raise DataError(f"weak_class {self.weak_class} out of range")
        coeffs = (self.label_slope_gain, self.label_weak_gain, self.label_bias)
        if not all(math.isfinite(c) for c in coeffs):
            raise DataError(f"label coefficients must be finite, got {coeffs}")


@dataclass
class World:
    config: WorldConfig
    dem: Raster
    slope: Raster
    lithology: CategoricalRaster
    stack: FeatureStack
    labels: Raster


def synth_dem(config: WorldConfig, rng: np.random.Generator) -> Raster:
    """Sum of random Gaussian hills plus low-amplitude white noise (meters)."""
    rows, cols = config.rows, config.cols
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    dem = np.zeros((rows, cols), dtype=np.float64)
    for _ in range(config.num_hills):
        cy = rng.uniform(0, rows)
        cx = rng.uniform(0, cols)
        sy = rng.uniform(0.08, 0.25) * rows
        sx = rng.uniform(0.08, 0.25) * cols
        h = rng.uniform(0.3, 1.0) * config.relief_m
        dem += h * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2.0)
    if config.noise_m > 0:
        dem += rng.normal(0.0, config.noise_m, size=(rows, cols))
    georef = GeoRef(0.0, 0.0, config.pixel_size, rows, cols)
    return Raster(georef, dem.astype(np.float32), np.ones((rows, cols), dtype=bool))


def slope_from_dem(dem: Raster) -> Raster:
    """Slope angle in radians from central differences of the elevation."""
    gy, gx = np.gradient(dem.values.astype(np.float64), dem.georef.pixel_size)
    slope = np.arctan(np.hypot(gy, gx)).astype(np.float32)
    return Raster(dem.georef, slope, dem.valid.copy())


def synth_categorical(config: WorldConfig, rng: np.random.Generator,
                      georef: GeoRef) -> CategoricalRaster:
    """Smoothed-noise field cut into equal-frequency classes."""
    field = gaussian_filter(
        rng.standard_normal((config.rows, config.cols)), config.class_smooth_px)
    qs = np.quantile(field, np.linspace(0, 1, config.num_classes + 1)[1:-1])
    codes = np.searchsorted(qs, field).astype(np.int32)
    vocab = [f"litho{i}" for i in range(config.num_classes)]
    return CategoricalRaster(georef, codes, np.ones_like(codes, dtype=bool), vocab)


def normalized_dem_channel(dem: Raster) -> Raster:
    """Min-max scaled elevation in [0, 1] for use as a model input."""
    vals = dem.values[dem.valid]
    lo, hi = float(vals.min()), float(vals.max())
    span = (hi - lo) or 1.0
    out = ((dem.values - lo) / span).astype(np.float32)
    return Raster(dem.georef, out, dem.valid.copy())


def plant_labels(dem: Raster, stack: FeatureStack, config: WorldConfig) -> Raster:
    """Bernoulli labels with p = sigmoid(a*slope + b*weak_uphill - c).

    ``weak_uphill`` is 1 where the highest ring neighbor at the configured
    looking distance sits on the weak class: the exact gather the alignment
    transform performs, so worlds with b != 0 genuinely reward alignment.
    Pure function of (dem, stack, config); draws use a dedicated substream
    of the config seed.
    """
    slope = stack.values[stack.channel_index("slope")].astype(np.float64)
    weak = stack.values[
        stack.channel_index(f"lithology/litho{config.weak_class}")].astype(np.float64)
    ring = ring_offsets(config.label_range_m / dem.georef.pixel_size)
    dr, dc = uphill_offsets(dem, ring)
    rows, cols = dem.georef.shape
    rr, cc = np.mgrid[0:rows, 0:cols]
    weak_uphill = weak[rr + dr, cc + dc]
    logits = (config.label_slope_gain * slope
              + config.label_weak_gain * weak_uphill
              - config.label_bias)
    draws = np.random.default_rng([config.seed, 1]).random((rows, cols))
    labels = (draws < sigmoid(logits)).astype(np.float32)
    return Raster(dem.georef, labels, dem.valid.copy())


def make_world(config: WorldConfig) -> World:
    """Deterministic world from the config seed: DEM, slope, classes, labels,
    and the model-ready stack (one-hots, normalized DEM, raw slope)."""
    rng = np.random.default_rng([config.seed, 0])
    dem = synth_dem(config, rng)
    slope = slope_from_dem(dem)
    lithology = synth_categorical(config, rng, dem.georef)
    stack = build_feature_stack(
        [normalized_dem_channel(dem), slope], [lithology],
        continuous_names=("dem", "slope"), group_names=("lithology",))
    labels = plant_labels(dem, stack, config)
    return World(config, dem, slope, lithology, stack, labels)


def gen_world(config: WorldConfig) -> tuple[Raster, FeatureStack]:
    """The (dem, stack) pair of ``make_world``."""
    world = make_world(config)
    return world.dem, world.stack
