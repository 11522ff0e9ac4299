"""Model zoo: constant baseline, per-pixel heads, and the skip-connected
fully convolutional network.

All models map a channel-major stack (B, C, H, W) to per-pixel probabilities
(B, 1, H, W). The per-pixel kinds (naive, llr, nn, lann) use only 1x1
convolutions; the segmentation kinds (cnn, lacnn) add a downsample/upsample
pyramid with long skip connections. The aligned kinds (lann, lacnn) differ
from their plain counterparts only in the input they are fed, which is
reflected in ``in_channels``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .engine import (
    Conv2d,
    ConcatChannels,
    Crop2d,
    MaxPool2,
    Optimizer,
    ReLU,
    Sigmoid,
    Tensor,
    UpsampleBilinear2,
    receptive_field_radius,
)
from .errors import DataError

MODEL_KINDS = ("naive", "llr", "nn", "lann", "cnn", "lacnn")
PER_PIXEL_KINDS = ("naive", "llr", "nn", "lann")
PYRAMID_KINDS = ("cnn", "lacnn")
ALIGNED_KINDS = ("lann", "lacnn")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    in_channels: int
    depth: int = 3
    widths: tuple[int, ...] = (32, 64, 128, 256)
    hidden: tuple[int, ...] = (64, 32)
    naive_p: float = 0.013

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise DataError(f"unknown model kind {self.kind!r}")
        if self.in_channels < 1:
            raise DataError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.kind in PYRAMID_KINDS:
            if self.depth < 1:
                raise DataError(f"depth must be >= 1, got {self.depth}")
            if len(self.widths) != self.depth + 1:
                raise DataError(
                    f"widths must list {self.depth + 1} values "
                    f"({self.depth} stages plus bottleneck), got {len(self.widths)}"
                )
            if any(w < 1 for w in self.widths):
                raise DataError(f"widths must be positive, got {self.widths}")
        if self.kind in ("nn", "lann") and (not self.hidden or any(h < 1 for h in self.hidden)):
            raise DataError(f"hidden must be non-empty positive, got {self.hidden}")
        if not 0.0 < self.naive_p < 1.0:
            raise DataError(f"naive_p must lie in (0, 1), got {self.naive_p}")


@dataclass
class _DownStage:
    conv_a: Conv2d
    relu_a: ReLU
    conv_b: Conv2d
    relu_b: ReLU
    pool: MaxPool2


@dataclass
class _UpStage:
    upsample: UpsampleBilinear2
    crop: Crop2d
    concat: ConcatChannels
    conv: Conv2d
    relu: ReLU


class Model:
    """Forward/backward container for one ModelSpec.

    ``forward`` returns probabilities; ``backward_from_logits`` starts from a
    gradient at the final pre-sigmoid layer (the numerically safe path used
    with the fused masked-NLL gradient), while ``backward`` accepts a
    gradient at the probabilities.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.down: list[_DownStage] = []
        self.up: list[_UpStage] = []
        self.bottom: list = []
        self.pixel_layers: list = []
        self.head_sigmoid = Sigmoid()

        if spec.kind == "naive":
            self.head_conv = None
        elif spec.kind == "llr":
            self.head_conv = Conv2d(spec.in_channels, 1, rng, ksize=1, dtype=dtype)
        elif spec.kind in ("nn", "lann"):
            chans = [spec.in_channels, *spec.hidden]
            for cin, cout in zip(chans[:-1], chans[1:]):
                self.pixel_layers.append((Conv2d(cin, cout, rng, ksize=1, dtype=dtype), ReLU()))
            self.head_conv = Conv2d(chans[-1], 1, rng, ksize=1, dtype=dtype)
        else:
            cin = spec.in_channels
            for i in range(spec.depth):
                w = spec.widths[i]
                self.down.append(_DownStage(
                    Conv2d(cin, w, rng, dtype=dtype), ReLU(),
                    Conv2d(w, w, rng, dtype=dtype), ReLU(), MaxPool2()))
                cin = w
            wb = spec.widths[spec.depth]
            self.bottom = [Conv2d(cin, wb, rng, dtype=dtype), ReLU(),
                           Conv2d(wb, wb, rng, dtype=dtype), ReLU()]
            for i in range(spec.depth):
                skip_w = spec.widths[i]
                below_w = spec.widths[i + 1]
                self.up.append(_UpStage(
                    UpsampleBilinear2(), Crop2d(), ConcatChannels(),
                    Conv2d(skip_w + below_w, skip_w, rng, dtype=dtype), ReLU()))
            self.head_conv = Conv2d(spec.widths[0], 1, rng, ksize=1, dtype=dtype)

    # -- parameters --------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, st in enumerate(self.down):
            out += st.conv_a.params(f"down{i}.conv_a")
            out += st.conv_b.params(f"down{i}.conv_b")
        if self.bottom:
            out += self.bottom[0].params("bottom.conv_a")
            out += self.bottom[2].params("bottom.conv_b")
        for i, st in enumerate(self.up):
            out += st.conv.params(f"up{i}.conv")
        for i, (conv, _) in enumerate(self.pixel_layers):
            out += conv.params(f"hidden{i}")
        if self.head_conv is not None:
            out += self.head_conv.params("head")
        return out

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # -- forward/backward ---------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise DataError(f"model input must be (B, C, H, W), got {x.shape}")
        spec = self.spec
        if spec.kind == "naive":
            b, _, h, w = x.shape
            return np.full((b, 1, h, w), spec.naive_p, dtype=self.dtype)
        if x.shape[1] != spec.in_channels:
            raise DataError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
        if spec.kind in PER_PIXEL_KINDS:
            for conv, relu in self.pixel_layers:
                x = relu.forward(conv.forward(x))
            return self.head_sigmoid.forward(self.head_conv.forward(x))

        skips: list[np.ndarray] = []
        for st in self.down:
            x = st.relu_a.forward(st.conv_a.forward(x))
            x = st.relu_b.forward(st.conv_b.forward(x))
            skips.append(x)
            x = st.pool.forward(x)
        x = self.bottom[1].forward(self.bottom[0].forward(x))
        x = self.bottom[3].forward(self.bottom[2].forward(x))
        for i in reversed(range(spec.depth)):
            st = self.up[i]
            x = st.upsample.forward(x)
            x = st.crop.forward(x, skips[i].shape[-2:])
            x = st.concat.forward(skips[i], x)
            x = st.relu.forward(st.conv.forward(x))
        return self.head_sigmoid.forward(self.head_conv.forward(x))

    def backward_from_logits(self, dz: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.kind == "naive":
            return np.zeros(dz.shape[:1] + (1,) + dz.shape[2:], dtype=dz.dtype)
        d = self.head_conv.backward(dz)
        if spec.kind in PER_PIXEL_KINDS:
            for conv, relu in reversed(self.pixel_layers):
                d = conv.backward(relu.backward(d))
            return d
        dskips: list[np.ndarray] = [None] * spec.depth
        for i in range(spec.depth):
            st = self.up[i]
            d = st.conv.backward(st.relu.backward(d))
            dskips[i], d = st.concat.backward(d)
            d = st.upsample.backward(st.crop.backward(d))
        d = self.bottom[2].backward(self.bottom[3].backward(d))
        d = self.bottom[0].backward(self.bottom[1].backward(d))
        for i in reversed(range(spec.depth)):
            st = self.down[i]
            d = st.pool.backward(d)
            d = d + dskips[i]
            d = st.conv_b.backward(st.relu_b.backward(d))
            d = st.conv_a.backward(st.relu_a.backward(d))
        return d

    def backward(self, dprobs: np.ndarray) -> np.ndarray:
        if self.spec.kind == "naive":
            return np.zeros_like(dprobs)
        return self.backward_from_logits(self.head_sigmoid.backward(dprobs))


def build_model(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    return Model(spec, rng, dtype=dtype)


def llr_channel_weights(model: Model) -> np.ndarray:
    """Per-channel weights of a trained logistic model, shape (in_channels,)."""
    if model.spec.kind != "llr":
        raise DataError(f"channel weights require kind 'llr', got {model.spec.kind!r}")
    return model.head_conv.weight.data[0, :, 0, 0].copy()


def _op_plan(spec: ModelSpec) -> list[str]:
    if spec.kind == "naive":
        return []
    if spec.kind == "llr":
        return ["conv1", "sigmoid"]
    if spec.kind in ("nn", "lann"):
        return ["conv1", "relu"] * len(spec.hidden) + ["conv1", "sigmoid"]
    ops: list[str] = []
    for _ in range(spec.depth):
        ops += ["conv3", "relu", "conv3", "relu", "pool"]
    ops += ["conv3", "relu", "conv3", "relu"]
    for _ in range(spec.depth):
        ops += ["upsample", "crop", "concat", "conv3", "relu"]
    ops += ["conv1", "sigmoid"]
    return ops


def receptive_field(spec: ModelSpec) -> int:
    """Receptive-field radius in input pixels for the given architecture."""
    return receptive_field_radius(_op_plan(spec))


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest plus a sibling little-endian .bin payload
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8"}


def _dtype_tag(dtype: np.dtype) -> str:
    for tag, np_str in _DTYPE_TAGS.items():
        if np.dtype(np_str) == np.dtype(dtype).newbyteorder("<"):
            return tag
    raise DataError(f"unsupported checkpoint dtype {dtype}")


def save_model(path: str | Path, model: Model, optimizer: Optimizer | None = None) -> None:
    path = Path(path)
    entries = []
    buffers = []
    offset = 0

    def add(name: str, arr: np.ndarray) -> None:
        nonlocal offset
        tag = _dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset})
        buffers.append(raw)
        offset += len(raw)

    for name, p in model.parameters():
        add(name, p.data)
    manifest: dict = {
        "format": "susmap-model",
        "spec": asdict(model.spec),
        "dtype": _dtype_tag(model.dtype),
        "tensors": entries,
    }
    if optimizer is not None:
        for name, arr in sorted(optimizer.state.m.items()):
            add(f"optim.m.{name}", arr)
        for name, arr in sorted(optimizer.state.v.items()):
            add(f"optim.v.{name}", arr)
        manifest["optimizer"] = {
            "kind": optimizer.kind,
            "lr": optimizer.lr,
            "weight_decay": optimizer.weight_decay,
            "betas": list(optimizer.betas),
            "eps": optimizer.eps,
            "step": optimizer.state.step,
        }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(buffers))


def load_model(path: str | Path) -> tuple[Model, Optimizer | None]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model manifest {path}: {exc}") from exc
    if manifest.get("format") != "susmap-model":
        raise DataError(f"{path} is not a model manifest")
    raw = path.with_suffix(".bin").read_bytes()

    spec_d = dict(manifest["spec"])
    spec = ModelSpec(
        kind=spec_d["kind"], in_channels=spec_d["in_channels"], depth=spec_d["depth"],
        widths=tuple(spec_d["widths"]), hidden=tuple(spec_d["hidden"]),
        naive_p=spec_d["naive_p"])
    model = build_model(spec, np.random.default_rng(0), dtype=_DTYPE_TAGS[manifest["dtype"]])

    arrays: dict[str, np.ndarray] = {}
    for ent in manifest["tensors"]:
        dt = np.dtype(_DTYPE_TAGS[ent["dtype"]])
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(shape)
        arrays[ent["name"]] = arr.copy()

    for name, p in model.parameters():
        if name not in arrays:
            raise DataError(f"checkpoint {path} is missing tensor {name}")
        if arrays[name].shape != p.data.shape:
            raise DataError(
                f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                f"expected {p.data.shape}")
        p.data[...] = arrays[name]

    optimizer = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optimizer = Optimizer(o["kind"], o["lr"], weight_decay=o["weight_decay"],
                              betas=tuple(o["betas"]), eps=o["eps"])
        optimizer.state.step = o["step"]
        for name, arr in arrays.items():
            if name.startswith("optim.m."):
                optimizer.state.m[name[len("optim.m."):]] = arr.astype(np.float64)
            elif name.startswith("optim.v."):
                optimizer.state.v[name[len("optim.v."):]] = arr.astype(np.float64)
    return model, optimizer
