"""Small builders shared across test modules."""

from __future__ import annotations

import numpy as np

from susmap.raster import CategoricalRaster, FeatureStack, GeoRef, Raster


def georef(rows: int, cols: int, pixel_size: float = 10.0) -> GeoRef:
    return GeoRef(0.0, 0.0, pixel_size, rows, cols)


def random_raster(rng, rows, cols, hole_frac: float = 0.0, lo=0.0, hi=100.0,
                  pixel_size: float = 10.0) -> Raster:
    """Uniform random continuous layer, optionally with invalid holes."""
    values = rng.uniform(lo, hi, size=(rows, cols)).astype(np.float32)
    valid = np.ones((rows, cols), dtype=bool)
    if hole_frac > 0:
        valid &= rng.random((rows, cols)) >= hole_frac
    values[~valid] = 0
    return Raster(georef(rows, cols, pixel_size), values, valid)


def integer_raster(rng, rows, cols, hole_frac: float = 0.0, high: int = 1000,
                   pixel_size: float = 10.0) -> Raster:
    """Integer-valued float64 layer; exact under +shift and small monotone maps."""
    values = rng.integers(0, high, size=(rows, cols)).astype(np.float64)
    valid = np.ones((rows, cols), dtype=bool)
    if hole_frac > 0:
        valid &= rng.random((rows, cols)) >= hole_frac
    values[~valid] = 0
    return Raster(georef(rows, cols, pixel_size), values, valid)


def random_stack(rng, rows, cols, channels, hole_frac: float = 0.0,
                 pixel_size: float = 10.0) -> FeatureStack:
    values = rng.standard_normal((channels, rows, cols)).astype(np.float32)
    valid = np.ones((channels, rows, cols), dtype=bool)
    if hole_frac > 0:
        valid &= rng.random((channels, rows, cols)) >= hole_frac
    values[~valid] = 0
    names = [f"ch{i}" for i in range(channels)]
    return FeatureStack(georef(rows, cols, pixel_size), values, valid, names)


def random_categorical(rng, rows, cols, num_classes, prefix="cls",
                       pixel_size: float = 10.0) -> CategoricalRaster:
    codes = rng.integers(0, num_classes, size=(rows, cols)).astype(np.int32)
    valid = np.ones((rows, cols), dtype=bool)
    vocab = [f"{prefix}{i}" for i in range(num_classes)]
    return CategoricalRaster(georef(rows, cols, pixel_size), codes, valid, vocab)
