"""Minimal reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: it provides exactly the differentiable
primitives the multi-frame segmentation model needs (convolutions in NHWC
layout, batch norm, time fusion, resize/crop plumbing) plus a handful of
elementwise operations used by the loss.  Forward activations are stored
densely on every node, gradients accumulate additively across fan-out, and
everything is plain numpy, so runs are deterministic for a fixed seed.

Layout convention: image tensors are (batch, height, width, channels).
The time axis of a frame stack is carried in the batch slot; operations
that care about time (``depthwise_conv1d_time``, ``mean_over_time``) say
so explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "TensorNode",
    "Precision",
    "ShapeMismatch",
    "UnknownAttribute",
    "MODEL_PRIMITIVES",
    "apply_primitive",
    "backprop",
    "zero_grads",
    "collect_nodes",
    "graph_op_tags",
    "finite_diff_check",
    "constant",
    "parameter",
    "conv2d",
    "transposed_conv2d",
    "depthwise_conv1d_time",
    "pointwise_conv",
    "batch_norm",
    "BatchNormState",
    "relu",
    "sigmoid",
    "add",
    "mean_over_time",
    "bilinear_resize",
    "bilinear_matrix",
    "crop",
    "concat_channels",
    "cast",
    "clip_values",
    "log",
    "power",
    "affine",
    "mean_all",
    "sum_all",
    "uniform_init",
]


class ShapeMismatch(ValueError):
    """Input shapes are incompatible with the requested primitive."""


class UnknownAttribute(ValueError):
    """An attribute name is not recognised by the requested primitive."""


# The closed set of primitives the segmentation model itself may use.
# The loss builds on a few extra elementwise ops (clip/log/power/...),
# which are intentionally not part of this set; a graph audit in the model
# tests checks that model forward passes stay inside it.
MODEL_PRIMITIVES = frozenset(
    {
        "conv2d",
        "transposed_conv2d",
        "depthwise_conv1d_time",
        "pointwise_conv",
        "batch_norm",
        "relu",
        "sigmoid",
        "add",
        "mean_over_time",
        "bilinear_resize",
        "crop",
        "concat_channels",
    }
)


@dataclass(frozen=True)
class Precision:
    """Floating point mode for a graph: f32 for training, f64 for checks."""

    mode: str = "f32"

    def __post_init__(self):
        if self.mode not in ("f32", "f64"):
            raise ValueError(f"unknown precision mode {self.mode!r}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.mode == "f32" else np.float64)


class TensorNode:
    """One value in a computation graph.

    ``value`` holds the forward activation, ``grad`` the accumulated
    d(root)/d(self) after :func:`backprop`.  Leaf nodes (parameters and
    constants) have no parents.
    """

    __slots__ = ("value", "grad", "op", "parents", "attrs", "name", "_backward")

    def __init__(self, value, op="leaf", parents=(), attrs=None, backward=None, name=None):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self.parents = tuple(parents)
        self.attrs = dict(attrs) if attrs else {}
        self.name = name
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"TensorNode(op={self.op!r}{label}, shape={self.shape}, dtype={self.dtype})"


def constant(value, name=None) -> TensorNode:
    """Leaf node that participates in the forward pass but wants no gradient."""
    return TensorNode(value, op="const", name=name)


def parameter(value, name=None) -> TensorNode:
    """Trainable leaf node."""
    return TensorNode(np.array(value, copy=True), op="param", name=name)


def uniform_init(rng: np.random.Generator, shape, fan_in, dtype=np.float32) -> np.ndarray:
    """Centered uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(float(max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Graph traversal


def collect_nodes(root: TensorNode) -> list[TensorNode]:
    """All nodes reachable from ``root``, in topological (parents-first) order."""
    order: list[TensorNode] = []
    seen: set[int] = set()
    stack: list[tuple[TensorNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def zero_grads(root: TensorNode) -> None:
    for node in collect_nodes(root):
        node.grad[...] = 0.0


def graph_op_tags(root: TensorNode) -> set[str]:
    """Distinct op tags of all non-leaf nodes reachable from ``root``."""
    return {n.op for n in collect_nodes(root) if n.parents}


def backprop(root: TensorNode) -> None:
    """Accumulate d(root)/d(node) into every reachable node's ``grad``.

    Gradients add across fan-out; call :func:`zero_grads` first when reusing
    a graph.  The root must be scalar-shaped (exactly one element).
    """
    if root.size != 1:
        raise ValueError(f"backprop root must be scalar-shaped, got shape {root.shape}")
    order = collect_nodes(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Shared conv machinery


def _require_same_dtype(*nodes: TensorNode):
    dt = nodes[0].dtype
    for n in nodes[1:]:
        if n.dtype != dt:
            raise ShapeMismatch(f"mixed dtypes in one primitive: {dt} vs {n.dtype}")
    return dt


def _same_padding(h, w, kh, kw, stride):
    oh = -(-h // stride)
    ow = -(-w // stride)
    ph = max((oh - 1) * stride + kh - h, 0)
    pw = max((ow - 1) * stride + kw - w, 0)
    return oh, ow, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, hp, wp, c = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def _check_image(x: TensorNode, tag: str):
    if x.value.ndim != 4:
        raise ShapeMismatch(f"{tag}: expected 4-d (batch,height,width,channels) input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Model primitives


def conv2d(x: TensorNode, w: TensorNode, b: TensorNode | None = None, stride: int = 1) -> TensorNode:
    """2-d convolution, zero 'same' padding.  Kernel layout (kh, kw, cin, cout)."""
    _check_image(x, "conv2d")
    if w.value.ndim != 4:
        raise ShapeMismatch(f"conv2d: kernel must be 4-d (kh,kw,cin,cout), got shape {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(
            f"conv2d: input channels {x.shape[3]} != kernel in-channels {cin} (dimension 'channels')"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape} != ({cout},) (dimension 'channels')")
    _require_same_dtype(*(n for n in (x, w, b) if n is not None))

    n, h, wd, _ = x.shape
    oh, ow, (pt, pb), (pl, pr) = _same_padding(h, wd, kh, kw, stride)
    xp = np.pad(x.value, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, w.value, axes=([3, 4, 5], [0, 1, 2]))
    if b is not None:
        out = out + b.value

    parents = (x, w) if b is None else (x, w, b)
    node = TensorNode(out, op="conv2d", parents=parents, attrs={"stride": stride})

    def _bw(gy):
        w.grad += np.tensordot(win, gy, axes=([0, 1, 2], [0, 1, 2]))
        cols = np.tensordot(gy, w.value, axes=([3], [3]))  # (n,oh,ow,kh,kw,cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += cols[:, :, :, i, j, :]
        x.grad += gxp[:, pt : pt + h, pl : pl + wd, :]
        if b is not None:
            b.grad += gy.sum(axis=(0, 1, 2))

    node._backward = _bw
    return node


def transposed_conv2d(x: TensorNode, w: TensorNode, b: TensorNode | None = None, stride: int = 2) -> TensorNode:
    """Transposed convolution upsampling spatial extents by exactly ``stride``.

    Kernel layout (kh, kw, cin, cout); kernel size and stride must satisfy
    (kh - stride) even so the output is exactly (stride*h, stride*w).
    """
    _check_image(x, "transposed_conv2d")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(
            f"transposed_conv2d: input channels {x.shape[3]} != kernel in-channels {cin} (dimension 'channels')"
        )
    if (kh - stride) % 2 or (kw - stride) % 2 or kh < stride or kw < stride:
        raise ShapeMismatch(
            f"transposed_conv2d: kernel {kh}x{kw} with stride {stride} cannot produce an exact x{stride} upsample"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"transposed_conv2d: bias shape {b.shape} != ({cout},) (dimension 'channels')")
    _require_same_dtype(*(n for n in (x, w, b) if n is not None))

    n, h, wd, _ = x.shape
    ph, pw = (kh - stride) // 2, (kw - stride) // 2
    ch, cw = (h - 1) * stride + kh, (wd - 1) * stride + kw  # canvas before crop
    cols = np.tensordot(x.value, w.value, axes=([3], [2]))  # (n,h,w,kh,kw,cout)
    canvas = np.zeros((n, ch, cw, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            canvas[:, i : i + (h - 1) * stride + 1 : stride, j : j + (wd - 1) * stride + 1 : stride, :] += cols[
                :, :, :, i, j, :
            ]
    out = canvas[:, ph : ph + h * stride, pw : pw + wd * stride, :]
    if b is not None:
        out = out + b.value

    parents = (x, w) if b is None else (x, w, b)
    node = TensorNode(out, op="transposed_conv2d", parents=parents, attrs={"stride": stride})

    def _bw(gy):
        gcanvas = np.zeros((n, ch, cw, cout), dtype=gy.dtype)
        gcanvas[:, ph : ph + h * stride, pw : pw + wd * stride, :] = gy
        gcols = np.empty((n, h, wd, kh, kw, cout), dtype=gy.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, :, i, j, :] = gcanvas[
                    :, i : i + (h - 1) * stride + 1 : stride, j : j + (wd - 1) * stride + 1 : stride, :
                ]
        x.grad += np.tensordot(gcols, w.value, axes=([3, 4, 5], [0, 1, 3]))
        w.grad += np.tensordot(x.value, gcols, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if b is not None:
            b.grad += gy.sum(axis=(0, 1, 2))

    node._backward = _bw
    return node


def depthwise_conv1d_time(x: TensorNode, w: TensorNode, b: TensorNode | None = None) -> TensorNode:
    """Per-pixel, per-channel linear mixing across the time (batch) axis.

    ``x`` is (T, H, W, c); ``w`` is (T_out, T, c) so each channel ``ci`` gets
    its own T x T map over time taps; ``b`` is (T_out, c).  No spatial mixing.
    """
    _check_image(x, "depthwise_conv1d_time")
    if w.value.ndim != 3:
        raise ShapeMismatch(f"depthwise_conv1d_time: weight must be (t_out,t_in,c), got shape {w.shape}")
    tout, tin, c = w.shape
    if x.shape[0] != tin:
        raise ShapeMismatch(
            f"depthwise_conv1d_time: stack length {x.shape[0]} != weight taps {tin} (dimension 'time')"
        )
    if x.shape[3] != c:
        raise ShapeMismatch(
            f"depthwise_conv1d_time: input channels {x.shape[3]} != weight channels {c} (dimension 'channels')"
        )
    if b is not None and b.shape != (tout, c):
        raise ShapeMismatch(f"depthwise_conv1d_time: bias shape {b.shape} != ({tout},{c})")
    _require_same_dtype(*(n for n in (x, w, b) if n is not None))

    out = np.einsum("mtc,thwc->mhwc", w.value, x.value, optimize=True)
    if b is not None:
        out = out + b.value[:, None, None, :]
    parents = (x, w) if b is None else (x, w, b)
    node = TensorNode(out, op="depthwise_conv1d_time", parents=parents)

    def _bw(gy):
        x.grad += np.einsum("mtc,mhwc->thwc", w.value, gy, optimize=True)
        w.grad += np.einsum("mhwc,thwc->mtc", gy, x.value, optimize=True)
        if b is not None:
            b.grad += gy.sum(axis=(1, 2))

    node._backward = _bw
    return node


def pointwise_conv(x: TensorNode, w: TensorNode, b: TensorNode | None = None) -> TensorNode:
    """1x1 convolution: a shared channel map at every pixel.  ``w`` is (cin, cout)."""
    _check_image(x, "pointwise_conv")
    if w.value.ndim != 2:
        raise ShapeMismatch(f"pointwise_conv: weight must be (cin,cout), got shape {w.shape}")
    cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(
            f"pointwise_conv: input channels {x.shape[3]} != weight in-channels {cin} (dimension 'channels')"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"pointwise_conv: bias shape {b.shape} != ({cout},)")
    _require_same_dtype(*(n for n in (x, w, b) if n is not None))

    out = x.value @ w.value
    if b is not None:
        out = out + b.value
    parents = (x, w) if b is None else (x, w, b)
    node = TensorNode(out, op="pointwise_conv", parents=parents)

    def _bw(gy):
        x.grad += gy @ w.value.T
        w.grad += np.tensordot(x.value, gy, axes=([0, 1, 2], [0, 1, 2]))
        if b is not None:
            b.grad += gy.sum(axis=(0, 1, 2))

    node._backward = _bw
    return node


class BatchNormState:
    """Running mean/var for one batch-norm layer (updated only in training)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def as_arrays(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm(
    x: TensorNode,
    gamma: TensorNode,
    beta: TensorNode,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> TensorNode:
    """Per-channel batch normalization over the (batch, height, width) axes.

    Training mode normalizes with per-batch statistics and updates the
    running averages in ``state``; eval mode normalizes with the stored
    running averages and touches nothing.
    """
    _check_image(x, "batch_norm")
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},) (dimension 'channels')"
        )
    _require_same_dtype(x, gamma, beta)
    axes = (0, 1, 2)

    if training:
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        state.running_mean[...] = momentum * state.running_mean + (1.0 - momentum) * mu
        state.running_var[...] = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = gamma.value * xhat + beta.value
    node = TensorNode(out, op="batch_norm", parents=(x, gamma, beta), attrs={"training": training})

    def _bw(gy):
        beta.grad += gy.sum(axis=axes)
        gamma.grad += (gy * xhat).sum(axis=axes)
        gxhat = gy * gamma.value
        if training:
            # Batch statistics are functions of x, so their gradient terms appear.
            x.grad += inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        else:
            x.grad += gxhat * inv

    node._backward = _bw
    return node


def relu(x: TensorNode) -> TensorNode:
    out = np.maximum(x.value, 0.0)
    node = TensorNode(out, op="relu", parents=(x,))

    def _bw(gy):
        x.grad += gy * (x.value > 0)

    node._backward = _bw
    return node


def sigmoid(x: TensorNode) -> TensorNode:
    # Numerically stable split by sign.
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    node = TensorNode(out, op="sigmoid", parents=(x,))

    def _bw(gy):
        x.grad += gy * out * (1.0 - out)

    node._backward = _bw
    return node


def add(a: TensorNode, b: TensorNode) -> TensorNode:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} differ")
    node = TensorNode(a.value + b.value, op="add", parents=(a, b))

    def _bw(gy):
        a.grad += gy
        b.grad += gy

    node._backward = _bw
    return node


def mean_over_time(x: TensorNode) -> TensorNode:
    """Collapse the time (batch) axis by averaging: (T,H,W,C) -> (1,H,W,C)."""
    _check_image(x, "mean_over_time")
    t = x.shape[0]
    node = TensorNode(x.value.mean(axis=0, keepdims=True), op="mean_over_time", parents=(x,))

    def _bw(gy):
        x.grad += gy / t

    node._backward = _bw
    return node


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Dense 1-d bilinear interpolation matrix (n_out x n_in), half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i1] += frac
    return m


def bilinear_resize(x: TensorNode, out_h: int, out_w: int) -> TensorNode:
    """Bilinear spatial resize to (out_h, out_w); exact linear map, exact adjoint."""
    _check_image(x, "bilinear_resize")
    _, h, w, _ = x.shape
    my = bilinear_matrix(h, out_h, dtype=x.dtype)
    mx = bilinear_matrix(w, out_w, dtype=x.dtype)
    tmp = np.einsum("ih,nhwc->niwc", my, x.value, optimize=True)
    out = np.einsum("jw,niwc->nijc", mx, tmp, optimize=True)
    node = TensorNode(out, op="bilinear_resize", parents=(x,), attrs={"out_h": out_h, "out_w": out_w})

    def _bw(gy):
        t = np.einsum("jw,nijc->niwc", mx, gy, optimize=True)
        x.grad += np.einsum("ih,niwc->nhwc", my, t, optimize=True)

    node._backward = _bw
    return node


def crop(x: TensorNode, y0: int, x0: int, h: int, w: int) -> TensorNode:
    """Spatial crop; backward scatters the gradient into the source window."""
    _check_image(x, "crop")
    if y0 < 0 or x0 < 0 or y0 + h > x.shape[1] or x0 + w > x.shape[2]:
        raise ShapeMismatch(
            f"crop: window ({y0}:{y0 + h}, {x0}:{x0 + w}) outside input of shape {x.shape} (spatial dimensions)"
        )
    out = x.value[:, y0 : y0 + h, x0 : x0 + w, :].copy()
    node = TensorNode(out, op="crop", parents=(x,), attrs={"y0": y0, "x0": x0, "h": h, "w": w})

    def _bw(gy):
        x.grad[:, y0 : y0 + h, x0 : x0 + w, :] += gy

    node._backward = _bw
    return node


def concat_channels(xs: Sequence[TensorNode]) -> TensorNode:
    xs = list(xs)
    if not xs:
        raise ShapeMismatch("concat_channels: need at least one input")
    base = xs[0].shape[:3]
    for x in xs:
        _check_image(x, "concat_channels")
        if x.shape[:3] != base:
            raise ShapeMismatch(
                f"concat_channels: spatial/batch shape {x.shape[:3]} != {base} (dimension 'batch/height/width')"
            )
    out = np.concatenate([x.value for x in xs], axis=3)
    node = TensorNode(out, op="concat_channels", parents=tuple(xs))
    splits = np.cumsum([x.shape[3] for x in xs])[:-1]

    def _bw(gy):
        for x, g in zip(xs, np.split(gy, splits, axis=3)):
            x.grad += g

    node._backward = _bw
    return node


# ---------------------------------------------------------------------------
# Elementwise / reduction ops used by the loss (not part of the model set)


def cast(x: TensorNode, dtype) -> TensorNode:
    """Dtype conversion; the loss runs in f64 so the epsilon guard survives
    the near-total cancellation of the divergence terms."""
    dtype = np.dtype(dtype)
    node = TensorNode(x.value.astype(dtype), op="cast", parents=(x,), attrs={"dtype": dtype.str})

    def _bw(gy):
        x.grad += gy.astype(x.dtype)

    node._backward = _bw
    return node


def clip_values(x: TensorNode, lo: float, hi: float) -> TensorNode:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    out = np.clip(x.value, lo, hi)
    node = TensorNode(out, op="clip", parents=(x,), attrs={"lo": lo, "hi": hi})

    def _bw(gy):
        x.grad += gy * ((x.value > lo) & (x.value < hi))

    node._backward = _bw
    return node


def log(x: TensorNode) -> TensorNode:
    out = np.log(x.value)
    node = TensorNode(out, op="log", parents=(x,))

    def _bw(gy):
        x.grad += gy / x.value

    node._backward = _bw
    return node


def power(x: TensorNode, p: float) -> TensorNode:
    """Elementwise x**p for constant p; inputs must stay positive."""
    out = np.power(x.value, p)
    node = TensorNode(out, op="power", parents=(x,), attrs={"p": p})

    def _bw(gy):
        x.grad += gy * p * np.power(x.value, p - 1.0)

    node._backward = _bw
    return node


def affine(x: TensorNode, scale=1.0, offset=0.0) -> TensorNode:
    """scale * x + offset with constant (scalar or broadcastable array) terms."""
    scale = np.asarray(scale, dtype=x.dtype)
    offset = np.asarray(offset, dtype=x.dtype)
    node = TensorNode(scale * x.value + offset, op="affine", parents=(x,))

    def _bw(gy):
        g = gy * scale
        x.grad += g if g.shape == x.shape else np.broadcast_to(g, x.shape)

    node._backward = _bw
    return node


def sum_all(x: TensorNode) -> TensorNode:
    node = TensorNode(np.asarray(x.value.sum()), op="sum_all", parents=(x,))

    def _bw(gy):
        x.grad += gy

    node._backward = _bw
    return node


def mean_all(x: TensorNode) -> TensorNode:
    n = x.size
    node = TensorNode(np.asarray(x.value.mean()), op="mean_all", parents=(x,))

    def _bw(gy):
        x.grad += gy / n

    node._backward = _bw
    return node


# ---------------------------------------------------------------------------
# Generic dispatcher

_PRIMITIVE_SPECS: dict[str, tuple[Callable, frozenset[str]]] = {
    "conv2d": (conv2d, frozenset({"stride"})),
    "transposed_conv2d": (transposed_conv2d, frozenset({"stride"})),
    "depthwise_conv1d_time": (depthwise_conv1d_time, frozenset()),
    "pointwise_conv": (pointwise_conv, frozenset()),
    "batch_norm": (batch_norm, frozenset({"state", "training", "momentum", "eps"})),
    "relu": (relu, frozenset()),
    "sigmoid": (sigmoid, frozenset()),
    "add": (add, frozenset()),
    "mean_over_time": (mean_over_time, frozenset()),
    "bilinear_resize": (bilinear_resize, frozenset({"out_h", "out_w"})),
    "crop": (crop, frozenset({"y0", "x0", "h", "w"})),
    "concat_channels": (concat_channels, frozenset()),
    "cast": (cast, frozenset({"dtype"})),
    "clip": (clip_values, frozenset({"lo", "hi"})),
    "log": (log, frozenset()),
    "power": (power, frozenset({"p"})),
    "affine": (affine, frozenset({"scale", "offset"})),
    "sum_all": (sum_all, frozenset()),
    "mean_all": (mean_all, frozenset()),
}


def apply_primitive(tag: str, inputs: Sequence[TensorNode], attrs: dict | None = None) -> TensorNode:
    """Build one graph node by primitive tag.

    Thin, validating front door over the direct functions; unknown tags and
    unknown attribute names are rejected before any computation runs.
    """
    if tag not in _PRIMITIVE_SPECS:
        raise UnknownAttribute(f"unknown primitive tag {tag!r}")
    fn, allowed = _PRIMITIVE_SPECS[tag]
    attrs = dict(attrs or {})
    for key in attrs:
        if key not in allowed:
            raise UnknownAttribute(f"primitive {tag!r} does not accept attribute {key!r}")
    if tag == "concat_channels":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Finite-difference validation


def finite_diff_check(
    graph_builder: Callable,
    params: TensorNode | Sequence[TensorNode],
    step: float = 1e-5,
    samples_per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``graph_builder(params)`` must rebuild a fresh scalar graph from the
    (possibly perturbed) parameter values on every call.  Returns the max
    over sampled coordinates of |analytic - central| / max(|analytic|,
    |central|, 1e-12).  Requires f64 parameters and step in [1e-7, 1e-4].
    """
    single = isinstance(params, TensorNode)
    plist = [params] if single else list(params)
    for p in plist:
        if p.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires f64 parameters, got {p.dtype} for {p.name or p!r}")
    if not (1e-7 <= step <= 1e-4):
        raise ValueError(f"step {step} outside [1e-7, 1e-4]")
    rng = rng or np.random.default_rng(0)

    arg = params if single else plist
    root = graph_builder(arg)
    if root.size != 1:
        raise ValueError("graph_builder must return a scalar node")
    zero_grads(root)
    for p in plist:
        p.grad[...] = 0.0
    backprop(root)
    analytic = [p.grad.copy() for p in plist]

    def loss_at() -> float:
        val = float(graph_builder(arg).value)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss during probing")
        return val

    worst = 0.0
    for p, g in zip(plist, analytic):
        n = p.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        flat = p.value.reshape(-1)
        for c in coords:
            keep = flat[c]
            try:
                flat[c] = keep + step
                up = loss_at()
                flat[c] = keep - step
                down = loss_at()
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"non-finite loss probing {p.name or 'param'}[{int(c)}]"
                ) from exc
            finally:
                flat[c] = keep
            numeric = (up - down) / (2.0 * step)
            a = float(g.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
