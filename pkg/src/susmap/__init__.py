"""Landslide-susceptibility mapping toolkit.

Heterogeneous raster encoding, uphill-aligned multi-range features, small
fully convolutional models trained with a from-scratch backpropagation
engine, and batch evaluation with ROC/NLL reports.
"""

__version__ = "0.1.0"

import os as _os

# SUSMAP_NUM_THREADS pins the BLAS pool before numpy loads it; a fixed
# thread count is what makes reruns byte-identical across machines.
_threads = _os.environ.get("SUSMAP_NUM_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

from .errors import DataError, SusmapError, UsageError
from .raster import (
    CategoricalRaster,
    FeatureStack,
    GeoRef,
    Raster,
    build_feature_stack,
    concat_stacks,
    encode_categorical,
    load_categorical,
    load_raster,
    load_stack,
    write_categorical,
    write_raster,
    write_stack,
)
from .alignment import (
    AlignmentConfig,
    align_features,
    find_uphill,
    ring_offsets,
    select_aligned_channels,
    uphill_offsets,
)
from .dataset import (
    Patch,
    make_patch_grid,
    mark_positives,
    oversample,
    split_patches,
    split_subset,
)
from .models import Model, ModelSpec, build_model, load_model, receptive_field, save_model
from .training import TrainConfig, TrainHistory, train
from .evaluation import (
    RocCurve,
    nll_from_scores,
    nll_metric,
    predict_full,
    roc_curve,
    split_scores,
)
from .synthetic import World, WorldConfig, gen_world, make_world, plant_labels

__all__ = [name for name in dir() if not name.startswith("_")]
