"""Minimal tensor/layer library with exact backpropagation.

Only the layers the segmentation architecture needs: 3x3 (and 1x1) stride-1
convolutions with zero padding, 2x2 max pooling, x2 bilinear upsampling
(align_corners=false convention), relu/sigmoid, channel concatenation, and a
masked Bernoulli negative log-likelihood. Every backward is the analytic
adjoint of its forward; ``gradient_suite`` verifies this against central
finite differences in double precision.

Conventions fixed for determinism: relu'(0) = 0; max-pool ties route the
gradient to the first cell in row-major block order; odd pooling dims are
padded with a -inf sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError

LOSS_CLAMP = 1e-12


class Tensor:
    """A named parameter: value array plus a same-shaped gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv2d:
    """Stride-1 convolution with zero padding preserving spatial shape.

    Kernel size 3 (pad 1) or 1 (pad 0). Implemented as one GEMM per kernel
    offset, which keeps memory bounded by a single padded copy of the input.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 ksize: int = 3, dtype=np.float32):
        if ksize not in (1, 3):
            raise DataError(f"unsupported kernel size {ksize}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.dtype = np.dtype(dtype)
        fan_in = in_ch * ksize * ksize
        self.weight = Tensor(kaiming_uniform((out_ch, in_ch, ksize, ksize), fan_in, rng, dtype))
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self._xp: np.ndarray | None = None

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]

    def _cols(self, xp: np.ndarray) -> np.ndarray:
        """Gather the k*k shifted views into one (C*k*k, B*H*W) matrix."""
        c, b = xp.shape[0], xp.shape[1]
        k, p = self.ksize, self.ksize // 2
        h, w = xp.shape[2] - 2 * p, xp.shape[3] - 2 * p
        cols = np.empty((c, k * k, b * h * w), dtype=xp.dtype)
        for i in range(k * k):
            dy, dx = divmod(i, k)
            cols[:, i] = xp[:, :, dy : dy + h, dx : dx + w].reshape(c, b * h * w)
        return cols.reshape(c * k * k, b * h * w)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DataError(f"conv expects (B, {self.in_ch}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        k, p = self.ksize, self.ksize // 2
        xp = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=self.dtype)
        xp[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
        self._xp = xp
        # one GEMM over all offsets; only xp is kept, the column matrix is
        # rebuilt in backward (copies are cheap next to the GEMM)
        acc = self.weight.data.reshape(self.out_ch, c * k * k) @ self._cols(xp)
        out = acc.reshape(self.out_ch, b, h, w).transpose(1, 0, 2, 3).copy()
        out += self.bias.data[None, :, None, None]
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xp = self._xp
        if xp is None:
            raise DataError("backward called before forward")
        b = xp.shape[1]
        k, p = self.ksize, self.ksize // 2
        h, w = xp.shape[2] - 2 * p, xp.shape[3] - 2 * p
        n = b * h * w
        dyf = dy.transpose(1, 0, 2, 3).reshape(self.out_ch, n)
        self.bias.grad += dyf.sum(axis=1)
        wflat = self.weight.data.reshape(self.out_ch, self.in_ch * k * k)
        self.weight.grad += (dyf @ self._cols(xp).T).reshape(self.weight.data.shape)
        dcols = (wflat.T @ dyf).reshape(self.in_ch, k * k, b, h, w)
        dxp = np.zeros_like(xp)
        for i in range(k * k):
            ky, kx = divmod(i, k)
            dxp[:, :, ky : ky + h, kx : kx + w] += dcols[:, i]
        return dxp[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3).copy()


class MaxPool2:
    """2x2 max pooling, stride 2; odd dims padded with a -inf sentinel."""

    def __init__(self):
        self._argmax: np.ndarray | None = None
        self._in_shape: tuple[int, ...] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        ho, wo = (h + 1) // 2, (w + 1) // 2
        if h % 2 or w % 2:
            xp = np.full((b, c, 2 * ho, 2 * wo), -np.inf, dtype=x.dtype)
            xp[:, :, :h, :w] = x
        else:
            xp = x
        blocks = xp.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
        self._argmax = blocks.argmax(axis=-1)
        self._in_shape = (b, c, h, w)
        return np.take_along_axis(blocks, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._argmax is None:
            raise DataError("backward called before forward")
        b, c, h, w = self._in_shape
        ho, wo = dy.shape[-2:]
        dblocks = np.zeros((b, c, ho, wo, 4), dtype=dy.dtype)
        np.put_along_axis(dblocks, self._argmax[..., None], dy[..., None], axis=-1)
        dxp = dblocks.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, 2 * ho, 2 * wo
        )
        return np.ascontiguousarray(dxp[:, :, :h, :w])


_INTERP_CACHE: dict[tuple[int, str], sp.csr_matrix] = {}


def _interp_matrix(n: int, dtype) -> sp.csr_matrix:
    """(2n, n) sparse doubling interpolation, align_corners=false."""
    key = (n, np.dtype(dtype).str)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    out = np.arange(2 * n)
    src = np.clip((out + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    rows = np.concatenate([out, out])
    cols = np.concatenate([i0, i1])
    data = np.concatenate([1.0 - w1, w1]).astype(dtype)
    mat = sp.coo_matrix((data, (rows, cols)), shape=(2 * n, n)).tocsr()
    _INTERP_CACHE[key] = mat
    return mat


def _apply_rows(mat: sp.spmatrix, x: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = mat @ flat
    permuted = np.moveaxis(out.reshape((mat.shape[0],) + moved.shape[1:]), 0, axis)
    return np.ascontiguousarray(permuted)


class UpsampleBilinear2:
    """Exact-adjoint x2 bilinear upsampling (align_corners=false)."""

    def __init__(self):
        self._in_shape: tuple[int, ...] | None = None
        self._dtype = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        self._dtype = x.dtype
        h, w = x.shape[-2:]
        out = _apply_rows(_interp_matrix(h, x.dtype), x, 2)
        return _apply_rows(_interp_matrix(w, x.dtype), out, 3)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._in_shape is None:
            raise DataError("backward called before forward")
        h, w = self._in_shape[-2:]
        out = _apply_rows(_interp_matrix(w, self._dtype).T.tocsr(), dy, 3)
        return _apply_rows(_interp_matrix(h, self._dtype).T.tocsr(), out, 2)


class ReLU:
    def __init__(self):
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0  # derivative at exactly 0 is defined as 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, dy.dtype.type(0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid:
    def __init__(self):
        self._out: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = sigmoid(x)
        return self._out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        s = self._out
        return dy * s * (1.0 - s)


class ConcatChannels:
    """Stack two activations channel-wise, a then b; backward splits."""

    def __init__(self):
        self._split: int | None = None

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise DataError(f"concat shape mismatch: {a.shape} vs {b.shape}")
        self._split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._split is None:
            raise DataError("backward called before forward")
        return dy[:, : self._split].copy(), dy[:, self._split :].copy()


class Crop2d:
    """Crop the bottom/right spatial excess; backward zero-pads it back.

    Used after upsampling when a sentinel-padded pooling stage made the
    decoder one pixel larger than its skip connection.
    """

    def __init__(self):
        self._pad: tuple[int, int] | None = None

    def forward(self, x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
        h, w = x.shape[-2:]
        th, tw = target_hw
        if th > h or tw > w:
            raise DataError(f"cannot crop {x.shape[-2:]} to larger {target_hw}")
        self._pad = (h - th, w - tw)
        if self._pad == (0, 0):
            return x
        return np.ascontiguousarray(x[:, :, :th, :tw])

    def backward(self, dy: np.ndarray) -> np.ndarray:
        ph, pw = self._pad
        if (ph, pw) == (0, 0):
            return dy
        return np.pad(dy, ((0, 0), (0, 0), (0, ph), (0, pw)))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def masked_bce_loss(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Bernoulli negative log-likelihood averaged over mask-true cells.

    Log arguments are clamped at 1e-12; the value is accumulated in double
    precision regardless of the input dtype.
    """
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise DataError("masked loss over zero valid cells")
    p = np.asarray(probs, dtype=np.float64)[m]
    y = np.asarray(labels, dtype=np.float64)[m]
    terms = y * np.log(np.maximum(p, LOSS_CLAMP)) + (1.0 - y) * np.log(
        np.maximum(1.0 - p, LOSS_CLAMP)
    )
    return float(-terms.sum() / n)


def bce_grad_wrt_logits(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gradient of the masked loss with respect to pre-sigmoid logits.

    Exact wherever the clamp is inactive: d/dz of the fused sigmoid+NLL is
    (p - y) / n at valid cells and 0 elsewhere.
    """
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise DataError("masked loss over zero valid cells")
    grad = (probs - labels.astype(probs.dtype)) / probs.dtype.type(n)
    return np.where(m, grad, probs.dtype.type(0))


# ---------------------------------------------------------------------------
# Optimizers and scheduling
# ---------------------------------------------------------------------------

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class OptimState:
    """Per-parameter moment buffers plus the step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Optimizer:
    """SGD (w <- w - lr*(g + wd*w)) or Adam with bias correction.

    The L2 term wd*w is added to the raw gradient before any moment updates.
    """

    def __init__(self, kind: str, lr: float, weight_decay: float = 0.001,
                 betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        if kind not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise DataError(f"learning rate must be > 0, got {lr}")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = OptimState()

    def step(self, params: Sequence[tuple[str, Tensor]]) -> None:
        if self.kind == "sgd":
            for _, p in params:
                g = p.grad + p.data * p.data.dtype.type(self.weight_decay)
                p.data -= p.data.dtype.type(self.lr) * g
            return
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        for name, p in params:
            g = (p.grad + p.data * p.data.dtype.type(self.weight_decay)).astype(np.float64)
            m = self.state.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
            v = self.state.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


class PlateauScheduler:
    """Cut the learning rate after `patience` consecutive non-improving epochs.

    Non-improvement means validation error >= best seen so far; the counter
    resets both on improvement and on each reduction.
    """

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.count = 0

    def update(self, val_error: float) -> float:
        if not math.isfinite(val_error):
            raise DataError(f"validation error must be finite, got {val_error}")
        if val_error < self.best:
            self.best = val_error
            self.count = 0
        else:
            self.count += 1
            if self.count >= self.patience:
                self.lr *= self.factor
                self.count = 0
        return self.lr


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    forward, backward, inputs: list[np.ndarray], params: list[Tensor],
    rng: np.random.Generator, *, step: float = 1e-3, tol: float = 1e-4, name: str = "op",
) -> GradCheckResult:
    """Compare analytic input/parameter gradients against central differences.

    ``forward()`` maps the current inputs/params to an output array;
    ``backward(seed_grad)`` must return per-input gradient arrays (same order
    as ``inputs``) after accumulating parameter gradients.
    """
    out = forward()
    seed_grad = rng.standard_normal(out.shape)
    for p in params:
        p.zero_grad()
    input_grads = backward(seed_grad)
    if not isinstance(input_grads, (tuple, list)):
        input_grads = [input_grads]

    def scalar() -> float:
        return float(np.sum(forward() * seed_grad))

    worst = 0.0
    targets = [(arr, grad) for arr, grad in zip(inputs, input_grads)]
    targets += [(p.data, p.grad) for p in params]
    for arr, analytic in targets:
        # plain indexed writes: safe for any memory layout of arr/analytic
        numeric = np.zeros(arr.shape, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up_val = scalar()
            arr[idx] = orig - step
            down_val = scalar()
            arr[idx] = orig
            numeric[idx] = (up_val - down_val) / (2.0 * step)
        worst = max(worst, _rel_error(np.asarray(analytic, dtype=np.float64), numeric))
    return GradCheckResult(name, worst, tol)


def _spread_values(rng: np.random.Generator, shape: tuple[int, ...], gap: float = 0.05) -> np.ndarray:
    """Random values with pairwise gaps well above the finite-difference step.

    The half-gap lattice shift keeps every value at least gap/2 - 0.01 away
    from zero, so relu kinks are as safe as maxpool ties."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2.0 + 0.5) * gap + rng.uniform(-0.01, 0.01, size=n)
    return vals.reshape(shape)


def gradient_suite(seeds: Iterable[int] = range(20), *, step: float = 1e-3,
                   tol: float = 1e-4) -> list[GradCheckResult]:
    """Finite-difference checks for every layer kind, in double precision.

    Each seed draws fresh shapes and values; shapes stay small so the exact
    sweep over every element is fast.
    """
    results: list[GradCheckResult] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        b = int(rng.integers(1, 3))
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        h = int(rng.integers(3, 8))
        w = int(rng.integers(3, 8))

        conv = Conv2d(cin, cout, rng, ksize=3, dtype=np.float64)
        x = rng.standard_normal((b, cin, h, w))
        results.append(check_gradients(
            lambda: conv.forward(x), conv.backward, [x],
            [conv.weight, conv.bias], rng, step=step, tol=tol, name=f"conv2d[{seed}]"))

        pool = MaxPool2()
        xp = _spread_values(rng, (b, cin, h, w))
        results.append(check_gradients(
            lambda: pool.forward(xp), pool.backward, [xp], [], rng,
            step=step, tol=tol, name=f"maxpool2[{seed}]"))

        up = UpsampleBilinear2()
        xu = rng.standard_normal((b, cin, h, w))
        results.append(check_gradients(
            lambda: up.forward(xu), up.backward, [xu], [], rng,
            step=step, tol=tol, name=f"upsample_bilinear2[{seed}]"))

        relu = ReLU()
        xr = _spread_values(rng, (b, cin, h, w))
        results.append(check_gradients(
            lambda: relu.forward(xr), relu.backward, [xr], [], rng,
            step=step, tol=tol, name=f"relu[{seed}]"))

        sig = Sigmoid()
        xs = rng.standard_normal((b, cin, h, w))
        results.append(check_gradients(
            lambda: sig.forward(xs), sig.backward, [xs], [], rng,
            step=step, tol=tol, name=f"sigmoid[{seed}]"))

        cat = ConcatChannels()
        xa = rng.standard_normal((b, cin, h, w))
        xb = rng.standard_normal((b, cout, h, w))
        results.append(check_gradients(
            lambda: cat.forward(xa, xb), cat.backward, [xa, xb], [], rng,
            step=step, tol=tol, name=f"concat[{seed}]"))

        # fused sigmoid + masked NLL, checked against the logits
        z = rng.standard_normal((b, 1, h, w))
        labels = (rng.random((b, 1, h, w)) < 0.3).astype(np.float64)
        mask = rng.random((b, 1, h, w)) < 0.8
        mask.reshape(-1)[0] = True  # never fully masked

        def loss_forward():
            return np.array(masked_bce_loss(sigmoid(z), labels, mask))

        def loss_backward(seed_grad):
            return bce_grad_wrt_logits(sigmoid(z), labels, mask) * float(seed_grad)

        results.append(check_gradients(
            loss_forward, loss_backward, [z], [], rng,
            step=step, tol=tol, name=f"masked_bce[{seed}]"))
    return results


# ---------------------------------------------------------------------------
# Receptive field
# ---------------------------------------------------------------------------


def receptive_field_radius(ops: Iterable[str]) -> int:
    """Receptive-field radius bound (input pixels, L-inf) of an op sequence.

    Tracks center-aligned positions at sampling scale s (input pixels per
    cell). A 3x3 conv adds s. A 2x2 pool reads both pooled cells, s/2 from
    the coarse center, then doubles s. Bilinear x2 upsampling reads coarse
    neighbors up to 3/4 of a coarse cell away (align_corners=false source
    positions have fractional parts 1/4 and 3/4), then halves s. 1x1 convs,
    activations, crops, and concatenations add nothing.

    Perturbations farther than the returned radius can never reach the
    output, and the bound is attained: some pixel phase (position modulo the
    accumulated pooling factor) reaches exactly this far, while other phases
    may reach a few pixels less.
    """
    scale = Fraction(1)
    radius = Fraction(0)
    for op in ops:
        if op == "conv3":
            radius += scale
        elif op == "pool":
            radius += Fraction(1, 2) * scale
            scale *= 2
        elif op == "upsample":
            radius += Fraction(3, 4) * scale
            scale /= 2
        elif op in ("conv1", "relu", "sigmoid", "concat", "crop"):
            pass
        else:
            raise DataError(f"unsupported op {op!r} in receptive-field plan")
    return int(math.ceil(radius))
