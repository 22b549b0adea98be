"""Focal KLD loss with exhaustive translation registration.

Labels carry an alignment margin; before scoring, the label is slid over
the prediction within the allowed window, the integer shift minimizing the
mean squared error on the registration channels is picked, and the label
is cropped at that shift. The shift is a constant of the optimization:
no gradient flows through the argmin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Prediction
from .scene import CHANNEL_ORDER, HighResLabelSet

DEFAULT_TASK_WEIGHTS = {name: 1.0 for name in CHANNEL_ORDER}


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 0.25
    epsilon: float = 1e-7
    max_shift: tuple[int, int] = (8, 8)  # (dx, dy), output-resolution pixels
    task_weights: tuple[tuple[str, float], ...] = tuple(DEFAULT_TASK_WEIGHTS.items())
    height_cap_m: float = 100.0
    registration_channels: tuple[str, ...] = ("grayscale", "building")

    def __post_init__(self):
        if self.focal_gamma <= 0:
            raise ValueError("focal exponent must be positive")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must be in (0, 0.5)")
        unknown = {n for n, _ in self.task_weights} - set(CHANNEL_ORDER)
        unknown |= set(self.registration_channels) - set(CHANNEL_ORDER)
        if unknown:
            raise ValueError(f"unknown channel names {sorted(unknown)}")

    def weight(self, name: str) -> float:
        return dict(self.task_weights).get(name, 0.0)


@dataclass(frozen=True)
class Alignment:
    shift: tuple[int, int]  # (dx, dy)
    mse: float


# ---------------------------------------------------------------------------
# Focal KLD


def focal_kld(y: np.ndarray, y_hat: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel (BinKLD(y, y_hat) + eps)^gamma with both inputs clipped.

    Numeric reference implementation; the graph twin below matches it.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    e = cfg.epsilon
    yc = np.clip(y, e, 1.0 - e)
    yh = np.clip(y_hat, e, 1.0 - e)
    kld = yc * np.log(yc / yh) + (1.0 - yc) * np.log((1.0 - yc) / (1.0 - yh))
    return np.power(kld + e, cfg.focal_gamma)


def focal_kld_node(y: np.ndarray, y_hat: T.TensorNode, cfg: LossConfig = LossConfig()) -> T.TensorNode:
    """Differentiable per-pixel focal KLD of a prediction node against constants.

    Computed in f64 regardless of the prediction dtype: the divergence terms
    cancel almost exactly near the optimum, and in f32 the cancellation
    noise swamps the 1e-7 epsilon guard.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    e = cfg.epsilon
    yc = np.clip(y.astype(np.float64), e, 1.0 - e)
    # constant part of the divergence plus the epsilon guard
    const = yc * np.log(yc) + (1.0 - yc) * np.log(1.0 - yc) + e
    if y_hat.dtype != np.float64:
        y_hat = T.cast(y_hat, np.float64)
    t = T.clip_values(y_hat, e, 1.0 - e)
    cross = T.affine(T.log(t), scale=-yc)
    cross1m = T.affine(T.log(T.affine(t, scale=-1.0, offset=1.0)), scale=-(1.0 - yc), offset=const)
    return T.power(T.add(cross, cross1m), cfg.focal_gamma)


# ---------------------------------------------------------------------------
# Registration


def _shift_window_mse(label_ch: np.ndarray, pred_ch: np.ndarray, mx: int, my: int) -> np.ndarray:
    """MSE between pred and every in-window label crop: grid (2my+1, 2mx+1).

    One python loop over dy keeps the arithmetic identical for every dx, so
    exact ties stay exact and the tie-break below is meaningful.
    """
    h, w = pred_ch.shape
    dt = np.promote_types(label_ch.dtype, pred_ch.dtype)
    pred_ch = pred_ch.astype(dt, copy=False)
    label_ch = np.ascontiguousarray(label_ch, dtype=dt)
    grid = np.empty((2 * my + 1, 2 * mx + 1), dtype=np.float64)
    for iy in range(2 * my + 1):
        band = label_ch[iy : iy + h, :]
        s0, s1 = band.strides
        windows = np.lib.stride_tricks.as_strided(
            band, shape=(2 * mx + 1, h, w), strides=(s1, s0, s1), writeable=False
        )
        diff = windows - pred_ch
        grid[iy, :] = np.einsum("khw,khw->k", diff, diff, optimize=True)
    return grid / (h * w)


def register_translation(label: HighResLabelSet, pred: Prediction, cfg: LossConfig = LossConfig()) -> Alignment:
    """Exhaustive integer-shift search minimizing MSE on the registration channels.

    Ties break by the smallest shift norm, then lexicographically (dy, dx).
    """
    mx, my = cfg.max_shift
    lab_mx, lab_my = label.margin_px
    if mx > lab_mx or my > lab_my:
        raise ValueError(f"label margins {label.margin_px} smaller than search window {cfg.max_shift}")
    h, w = pred.shape
    if label.shape != (h + 2 * lab_my, w + 2 * lab_mx):
        raise ValueError(
            f"label shape {label.shape} incompatible with prediction {pred.shape} and margins {label.margin_px}"
        )

    grid = np.zeros((2 * my + 1, 2 * mx + 1), dtype=np.float64)
    for name in cfg.registration_channels:
        lab_ch = getattr(label, name)[lab_my - my : lab_my + my + h + 1, lab_mx - mx : lab_mx + mx + w + 1]
        pred_ch = getattr(pred, name) if name != "height_m" else getattr(pred, name) / cfg.height_cap_m
        grid += _shift_window_mse(lab_ch, pred_ch, mx, my)
    grid /= len(cfg.registration_channels)

    dys, dxs = np.meshgrid(np.arange(-my, my + 1), np.arange(-mx, mx + 1), indexing="ij")
    flat_mse = grid.ravel()
    flat_dy = dys.ravel()
    flat_dx = dxs.ravel()
    norm2 = flat_dy**2 + flat_dx**2
    best = np.lexsort((flat_dx, flat_dy, norm2, flat_mse))[0]
    return Alignment(shift=(int(flat_dx[best]), int(flat_dy[best])), mse=float(flat_mse[best]))


def shift_and_crop(label: HighResLabelSet, shift: tuple[int, int]) -> HighResLabelSet:
    """Crop the label at an integer shift; pure index offsetting, no interpolation."""
    dx, dy = shift
    mx, my = label.margin_px
    if abs(dx) > mx or abs(dy) > my:
        raise ValueError(f"shift {shift} outside margins {label.margin_px}")
    h = label.shape[0] - 2 * my
    w = label.shape[1] - 2 * mx
    sl = (slice(my + dy, my + dy + h), slice(mx + dx, mx + dx + w))
    return HighResLabelSet(
        label.resolution_m,
        (0, 0),
        *(getattr(label, name)[sl].copy() for name in CHANNEL_ORDER),
        splat=label.splat,
    )


# ---------------------------------------------------------------------------
# Multi-task aggregation


def multitask_loss(
    pred: Prediction,
    registered: HighResLabelSet,
    has_height: bool,
    cfg: LossConfig = LossConfig(),
) -> T.TensorNode:
    """Weighted sum over tasks of mean per-pixel focal KLD, as a scalar node.

    Expects the label already registered and cropped to the prediction
    extents (one shared shift for all channels). Heights are compared in
    cap-normalized [0, 1] space; a missing height label zeroes that task's
    weight, so its head gradient is exactly zero.
    """
    if registered.shape != pred.shape:
        raise ValueError(f"registered label {registered.shape} != prediction {pred.shape}")
    h, w = pred.shape
    target = registered.stack().astype(np.float64)
    hi = CHANNEL_ORDER.index("height_m")
    target[:, :, hi] = target[:, :, hi] / cfg.height_cap_m

    weights = np.array([cfg.weight(name) for name in CHANNEL_ORDER], dtype=np.float64)
    if not has_height:
        weights[hi] = 0.0
    per_px = focal_kld_node(target[None], pred.node, cfg)
    weighted = T.affine(per_px, scale=weights / (h * w))
    return T.sum_all(weighted)


def registered_loss(
    pred: Prediction,
    label: HighResLabelSet,
    has_height: bool,
    cfg: LossConfig = LossConfig(),
) -> tuple[T.TensorNode, Alignment]:
    """Register, crop, and score in one go; the usual training path."""
    alignment = register_translation(label, pred, cfg)
    registered = shift_and_crop(label, alignment.shift)
    return multitask_loss(pred, registered, has_height, cfg), alignment
