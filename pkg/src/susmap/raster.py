"""Georeferenced raster layers, cleaning, one-hot encoding, and feature stacks.

Interchange format
------------------
A layer is stored as two sibling files sharing one stem:

* ``<stem>.json`` -- text header with fields ``rows``, ``cols``, ``origin_x``,
  ``origin_y``, ``pixel_size``, ``nodata``, ``valid_min``, ``valid_max``,
  ``dtype`` (``"f32"`` or ``"i32"``) and ``order`` (``"row-major"``).
  Categorical layers add a ``vocabulary`` array; multi-channel stacks add a
  ``channels`` array of channel names.
* ``<stem>.bin`` -- little-endian payload of ``rows*cols`` values (stacks:
  ``channels*rows*cols``, plane after plane, channel-major).

Cells equal to the nodata sentinel, or outside ``[valid_min, valid_max]``,
are masked invalid on load. Invalid cells are written back as the sentinel,
so a write/load round trip is bit-exact on valid cells and exact on the mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

DEFAULT_NODATA = -9999.0
DEFAULT_NODATA_CODE = -9999

# Channel-group sizes of the full standardized configuration: 44 lithologies,
# 5 land covers, 5 rock families (incl. unknown), 38 rock ages, then DEM and
# slope for 94 channels total. The group order below is frozen so that saved
# models and selected-channel indices stay portable.
CANONICAL_GROUP_ORDER = ("lithology", "land_cover", "rock_family", "rock_age")
CANONICAL_GROUP_SIZES = {"lithology": 44, "land_cover": 5, "rock_family": 5, "rock_age": 38}
CANONICAL_CONTINUOUS = ("dem", "slope")

LAND_COVER_CLASSES = (
    "agricultural_areas",
    "artificial_surfaces",
    "forest_and_semi_natural_areas",
    "water_bodies",
    "wetlands",
)
ROCK_FAMILY_CLASSES = ("metamorphic", "sedimentary", "plutonic", "volcanic", "unknown")


@dataclass(frozen=True)
class GeoRef:
    """Grid geometry: map-space origin, pixel size in meters, and shape."""

    origin_x: float
    origin_y: float
    pixel_size: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise DataError(f"pixel_size must be > 0, got {self.pixel_size}")
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"grid shape must be >= 1x1, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass
class Raster:
    """Single-channel grid of real values with a validity mask."""

    georef: GeoRef
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.georef.shape or self.valid.shape != self.georef.shape:
            raise DataError(
                f"raster arrays {self.values.shape}/{self.valid.shape} do not match "
                f"georef shape {self.georef.shape}"
            )


@dataclass
class CategoricalRaster:
    """Grid of integer category codes plus the ordered category vocabulary."""

    georef: GeoRef
    codes: np.ndarray
    valid: np.ndarray
    vocabulary: list[str]

    def __post_init__(self):
        if self.codes.shape != self.georef.shape or self.valid.shape != self.georef.shape:
            raise DataError("categorical arrays do not match georef shape")
        if not self.vocabulary:
            raise DataError("vocabulary must be non-empty")
        codes = self.codes[self.valid]
        if codes.size and (codes.min() < 0 or codes.max() >= len(self.vocabulary)):
            raise DataError(
                f"valid codes must lie in [0, {len(self.vocabulary)}), "
                f"found range [{codes.min()}, {codes.max()}]"
            )


@dataclass
class FeatureStack:
    """Ordered multi-channel stack sharing one GeoRef.

    Stored channel-major as dense ``(channels, rows, cols)`` arrays so that
    per-channel tile reads are contiguous.
    """

    georef: GeoRef
    values: np.ndarray  # (C, rows, cols) float32
    valid: np.ndarray  # (C, rows, cols) bool
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        expect = (len(self.channel_names),) + self.georef.shape
        if self.values.shape != expect or self.valid.shape != expect:
            raise DataError(
                f"stack arrays {self.values.shape} do not match {expect} "
                "(channels, rows, cols)"
            )

    @property
    def num_channels(self) -> int:
        return len(self.channel_names)

    def channel(self, index: int) -> Raster:
        return Raster(self.georef, self.values[index], self.valid[index])

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise DataError(f"no channel named {name!r}") from None


# ---------------------------------------------------------------------------
# Interchange I/O
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".bin")


def read_header(path: str | Path) -> dict:
    """Parse and validate an interchange header without touching the payload."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"header file not found: {path}")
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed header {path}: {exc}") from exc
    for key in ("rows", "cols", "origin_x", "origin_y", "pixel_size", "nodata", "dtype"):
        if key not in header:
            raise DataError(f"header {path} missing field {key!r}")
    if header["dtype"] not in _DTYPES:
        raise DataError(f"header {path}: unsupported dtype {header['dtype']!r}")
    if header.get("order", "row-major") != "row-major":
        raise DataError(f"header {path}: unsupported order {header.get('order')!r}")
    header.setdefault("valid_min", None)
    header.setdefault("valid_max", None)
    return header


def georef_from_header(header: dict) -> GeoRef:
    return GeoRef(
        origin_x=float(header["origin_x"]),
        origin_y=float(header["origin_y"]),
        pixel_size=float(header["pixel_size"]),
        rows=int(header["rows"]),
        cols=int(header["cols"]),
    )


def _read_payload(path: Path, header: dict, num_channels: int) -> np.ndarray:
    payload = _payload_path(path)
    if not payload.exists():
        raise DataError(f"payload file not found: {payload}")
    raw = np.fromfile(payload, dtype=_DTYPES[header["dtype"]])
    rows, cols = int(header["rows"]), int(header["cols"])
    expected = num_channels * rows * cols
    if raw.size != expected:
        raise DataError(
            f"payload {payload} holds {raw.size} values, header implies {expected}"
        )
    shape = (num_channels, rows, cols) if num_channels > 1 else (rows, cols)
    return raw.reshape(shape)


def _mask_from(values: np.ndarray, header: dict) -> np.ndarray:
    valid = values != np.asarray(header["nodata"], dtype=values.dtype)
    vmin, vmax = header.get("valid_min"), header.get("valid_max")
    if vmin is not None:
        valid &= values >= vmin
    if vmax is not None:
        valid &= values <= vmax
    return valid


def load_raster(path: str | Path) -> Raster:
    """Load a continuous layer, masking nodata and out-of-range cells."""
    path = Path(path)
    header = read_header(path)
    if header["dtype"] != "f32":
        raise DataError(f"{path}: expected dtype f32 for a continuous layer")
    if "channels" in header:
        raise DataError(f"{path}: is a stack; use load_stack")
    values = _read_payload(path, header, 1)
    return Raster(georef_from_header(header), values, _mask_from(values, header))


def load_categorical(path: str | Path) -> CategoricalRaster:
    """Load a categorical layer; cells with codes outside the vocabulary are invalid."""
    path = Path(path)
    header = read_header(path)
    if header["dtype"] != "i32":
        raise DataError(f"{path}: expected dtype i32 for a categorical layer")
    vocab = header.get("vocabulary")
    if not vocab:
        raise DataError(f"{path}: categorical layer missing vocabulary")
    codes = _read_payload(path, header, 1)
    valid = _mask_from(codes, header)
    valid &= (codes >= 0) & (codes < len(vocab))
    return CategoricalRaster(georef_from_header(header), codes, valid, list(vocab))


def _base_header(georef: GeoRef, nodata, dtype: str) -> dict:
    return {
        "rows": georef.rows,
        "cols": georef.cols,
        "origin_x": georef.origin_x,
        "origin_y": georef.origin_y,
        "pixel_size": georef.pixel_size,
        "nodata": nodata,
        "valid_min": None,
        "valid_max": None,
        "dtype": dtype,
        "order": "row-major",
    }


def _write_pair(path: Path, header: dict, payload: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    payload.astype(_DTYPES[header["dtype"]]).tofile(_payload_path(path))


def write_raster(
    path: str | Path,
    raster: Raster,
    *,
    nodata: float = DEFAULT_NODATA,
    valid_min: float | None = None,
    valid_max: float | None = None,
) -> None:
    """Write a continuous layer; invalid cells become the nodata sentinel."""
    path = Path(path)
    values = np.asarray(raster.values, dtype=np.float32)
    if np.any(values[raster.valid] == np.float32(nodata)):
        raise DataError(f"valid cell equals nodata sentinel {nodata}; pick another sentinel")
    header = _base_header(raster.georef, nodata, "f32")
    header["valid_min"] = valid_min
    header["valid_max"] = valid_max
    out = values.copy()
    out[~raster.valid] = np.float32(nodata)
    _write_pair(path, header, out)


def write_categorical(
    path: str | Path, cat: CategoricalRaster, *, nodata: int = DEFAULT_NODATA_CODE
) -> None:
    path = Path(path)
    header = _base_header(cat.georef, int(nodata), "i32")
    header["vocabulary"] = list(cat.vocabulary)
    out = np.asarray(cat.codes, dtype=np.int32).copy()
    out[~cat.valid] = np.int32(nodata)
    _write_pair(path, header, out)


def write_stack(path: str | Path, stack: FeatureStack, *, nodata: float = DEFAULT_NODATA) -> None:
    """Write a multi-channel stack (channel-major payload)."""
    path = Path(path)
    values = np.asarray(stack.values, dtype=np.float32)
    if np.any(values[stack.valid] == np.float32(nodata)):
        raise DataError(f"valid cell equals nodata sentinel {nodata}; pick another sentinel")
    header = _base_header(stack.georef, nodata, "f32")
    header["channels"] = list(stack.channel_names)
    out = values.copy()
    out[~stack.valid] = np.float32(nodata)
    _write_pair(path, header, out)


def load_stack(path: str | Path) -> FeatureStack:
    path = Path(path)
    header = read_header(path)
    channels = header.get("channels")
    if not channels:
        raise DataError(f"{path}: header has no channels array; use load_raster")
    values = _read_payload(path, header, len(channels))
    if values.ndim == 2:  # single-channel stacks still need a channel axis
        values = values[None]
    valid = _mask_from(values, header)
    values[~valid] = 0  # stack invariant: masked cells hold zeros
    return FeatureStack(georef_from_header(header), values, valid, list(channels))


# ---------------------------------------------------------------------------
# Encoding and stacking
# ---------------------------------------------------------------------------


def encode_categorical(cat: CategoricalRaster) -> list[Raster]:
    """One-hot encode: one binary raster per vocabulary entry.

    At each valid cell exactly one channel is 1; invalid cells are 0 in every
    channel and invalid everywhere (mask monotonicity).
    """
    n = len(cat.vocabulary)
    rows, cols = cat.georef.shape
    planes = np.zeros((n, rows, cols), dtype=np.float32)
    safe_codes = np.where(cat.valid, cat.codes, 0).astype(np.int64)
    np.put_along_axis(
        planes.reshape(n, rows * cols),
        safe_codes.reshape(1, rows * cols),
        cat.valid.reshape(1, rows * cols).astype(np.float32),
        axis=0,
    )
    return [Raster(cat.georef, planes[i], cat.valid.copy()) for i in range(n)]


def build_feature_stack(
    continuous: Sequence[Raster],
    categorical: Sequence[CategoricalRaster],
    *,
    continuous_names: Sequence[str] = CANONICAL_CONTINUOUS,
    group_names: Sequence[str] | None = None,
) -> FeatureStack:
    """Concatenate one-hot categorical groups then continuous layers.

    Canonical order for the full configuration: lithology, land cover, rock
    family, rock age one-hots, then DEM and slope (94 channels). Categorical
    channels are named ``<group>/<class>``.
    """
    if len(continuous_names) != len(continuous):
        raise DataError("continuous_names length must match continuous layers")
    if group_names is None:
        group_names = [f"group{i}" for i in range(len(categorical))]
    if len(group_names) != len(categorical):
        raise DataError("group_names length must match categorical layers")
    if not continuous and not categorical:
        raise DataError("cannot build an empty stack")

    georef = continuous[0].georef if continuous else categorical[0].georef
    for layer in list(continuous) + list(categorical):
        if layer.georef != georef:
            raise DataError(f"GeoRef mismatch: {layer.georef} != {georef}")

    channels: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    names: list[str] = []
    for group, cat in zip(group_names, categorical):
        for cls, plane in zip(cat.vocabulary, encode_categorical(cat)):
            channels.append(plane.values)
            masks.append(plane.valid)
            names.append(f"{group}/{cls}")
    for name, layer in zip(continuous_names, continuous):
        vals = np.asarray(layer.values, dtype=np.float32)
        # invariant: stack values are 0 wherever the mask is false
        channels.append(np.where(layer.valid, vals, np.float32(0)))
        masks.append(layer.valid)
        names.append(str(name))

    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise DataError(f"duplicate channel names: {dupes}")

    return FeatureStack(georef, np.stack(channels), np.stack(masks), names)


def concat_stacks(a: FeatureStack, b: FeatureStack) -> FeatureStack:
    """Append the channels of b after those of a (shared GeoRef required)."""
    if a.georef != b.georef:
        raise DataError("GeoRef mismatch between stacks")
    names = a.channel_names + b.channel_names
    if len(set(names)) != len(names):
        raise DataError("duplicate channel names when concatenating stacks")
    return FeatureStack(
        a.georef,
        np.concatenate([a.values, b.values]),
        np.concatenate([a.valid, b.valid]),
        names,
    )
