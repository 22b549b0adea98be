"""Evaluation metrics and the model evaluation pipeline.

Covers binary mIoU with a joint threshold/dilation sweep, centroid-sum
count calibration and estimation, count regression metrics, bucketed
building-height error statistics, and built-up area error. The evaluation
pipeline mirrors training: forward on a center crop with the hr-incidence
metadata forced to 0, registration of the label to the prediction, then
metrics on an inner center crop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import loss as lossmod
from .dataset import Dataset
from .model import Prediction, StudentModel
from .scene import CHANNEL_ORDER
from .stack import select_window
from .tensor import constant
from .train import TrainConfig, crop_frames

EIGHT_CONN = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SweepSpec:
    thresholds: tuple[float, ...] = tuple(np.round(np.arange(0.01, 1.0, 0.01), 2))
    dilation_radii: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if not self.thresholds or not self.dilation_radii:
            raise ValueError("sweep needs at least one threshold and one dilation radius")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("thresholds must be sorted ascending")


@dataclass(frozen=True)
class CountCalibration:
    k: float

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("count scale must be positive")


# ---------------------------------------------------------------------------
# Segmentation metrics


def iou_binary(pred_mask: np.ndarray, label_mask: np.ndarray) -> float:
    """Intersection over union of two boolean masks; empty vs empty is 1."""
    if pred_mask.shape != label_mask.shape:
        raise ValueError(f"shape mismatch {pred_mask.shape} vs {label_mask.shape}")
    if pred_mask.dtype != bool or label_mask.dtype != bool:
        raise ValueError("masks must be boolean")
    union = np.logical_or(pred_mask, label_mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred_mask, label_mask).sum() / union)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-structuring-element dilation; radius 0 is the identity."""
    if radius == 0:
        return mask
    return ndimage.maximum_filter(mask, size=2 * radius + 1, mode="constant", cval=False)


def _tile_miou(mask: np.ndarray, label: np.ndarray) -> float:
    fg = iou_binary(mask, label)
    bg = iou_binary(~mask, ~label)
    return 0.5 * (fg + bg)


def miou_sweep(
    confidences: list[np.ndarray],
    labels: list[np.ndarray],
    spec: SweepSpec = SweepSpec(),
) -> tuple[float, float, int]:
    """Best per-tile-averaged mIoU over a joint (threshold, dilation) grid.

    mIoU is the mean of foreground and background IoU; tile scores are
    averaged over the dataset before maximizing. Ties go to the lowest
    threshold, then the smallest dilation radius.
    """
    if len(confidences) != len(labels) or not confidences:
        raise ValueError("need equally many confidence maps and labels")
    best = (-1.0, 0.0, 0)
    for thr in spec.thresholds:
        base_masks = [c >= thr for c in confidences]
        for r in spec.dilation_radii:
            total = 0.0
            for m, lab in zip(base_masks, labels):
                total += _tile_miou(dilate(m, r), lab)
            score = total / len(labels)
            if score > best[0]:
                best = (score, float(thr), int(r))
    return best


def builtup_area_error(
    confidences: list[np.ndarray],
    label_masks: list[np.ndarray],
    thresholds,
) -> tuple[float, float]:
    """Relative error of total predicted foreground area, minimized over thresholds.

    Returns (min relative error, the lowest threshold achieving it).
    """
    if not confidences:
        raise ValueError("need at least one tile")
    label_area = sum(int(m.sum()) for m in label_masks)
    if label_area == 0:
        raise ValueError("labels contain no foreground area")
    best_err, best_thr = math.inf, None
    for thr in thresholds:
        pred_area = sum(int((c >= thr).sum()) for c in confidences)
        err = abs(pred_area - label_area) / label_area
        if err < best_err:
            best_err, best_thr = err, float(thr)
    return best_err, best_thr


# ---------------------------------------------------------------------------
# Counting


def calibrate_count_scale(centroid_labels, true_counts) -> CountCalibration:
    """K = mean over samples of (centroid label mass / true count), zeros excluded."""
    factors = [lab.sum() / n for lab, n in zip(centroid_labels, true_counts) if n > 0]
    if not factors:
        raise ValueError("count calibration needs at least one sample with buildings")
    return CountCalibration(float(np.mean(factors)))


def estimate_count(pred_centroid: np.ndarray, cal: CountCalibration) -> float:
    """Plain spatial sum over the centroid channel divided by K; no peak finding."""
    return float(pred_centroid.sum() / cal.k)


def count_metrics(estimates, truths) -> tuple[float, float]:
    """(R^2, MAE); R^2 is nan when the truths have zero variance."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape or est.size < 2:
        raise ValueError("need two equally long sequences of at least 2 samples")
    mae = float(np.abs(est - tru).mean())
    ss_tot = float(((tru - tru.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return math.nan, mae
    ss_res = float(((tru - est) ** 2).sum())
    return 1.0 - ss_res / ss_tot, mae


# ---------------------------------------------------------------------------
# Heights


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Classic nearest-rank percentile: value at index ceil(p/100 * n), 1-based."""
    values = np.sort(np.asarray(values))
    if values.size == 0:
        raise ValueError("empty sample")
    rank = max(int(math.ceil(p / 100.0 * values.size)), 1)
    return float(values[rank - 1])


HEIGHT_BUCKETS = (
    ("(0,5)", lambda h: 0.0 < h < 5.0),
    ("[5,20)", lambda h: 5.0 <= h < 20.0),
    ("[20,100]", lambda h: 20.0 <= h <= 100.0),
    ("(0,100]", lambda h: 0.0 < h <= 100.0),
)


def height_error_stats(pred_heights, label_heights, building_masks) -> dict:
    """Bucketed per-instance absolute height error.

    Instances are 8-connected components of the TRUE building mask; each
    instance's height is the mean over its pixels. Buckets are keyed by the
    instance's true height; the last bucket is the overall table.
    """
    errors: list[tuple[float, float]] = []  # (true height, abs error)
    for pred, lab, mask in zip(pred_heights, label_heights, building_masks):
        labeled, n = ndimage.label(mask, structure=EIGHT_CONN)
        for idx in range(1, n + 1):
            sel = labeled == idx
            true_h = float(lab[sel].mean())
            pred_h = float(pred[sel].mean())
            errors.append((true_h, abs(pred_h - true_h)))

    table = {}
    for name, member in HEIGHT_BUCKETS:
        ae = np.array([e for h, e in errors if member(h)])
        if ae.size == 0:
            table[name] = {"count": 0}
            continue
        table[name] = {
            "count": int(ae.size),
            "mean": float(ae.mean()),
            "p50": nearest_rank_percentile(ae, 50),
            "p90": nearest_rank_percentile(ae, 90),
            "p95": nearest_rank_percentile(ae, 95),
            "p99": nearest_rank_percentile(ae, 99),
        }
    return table


# ---------------------------------------------------------------------------
# Evaluation pipeline


REPORT_HEADER = {
    "miou_definition": "mean of foreground and background IoU, per-tile IoU averaged over tiles",
    "percentile_rule": "nearest-rank",
    "registration": "exhaustive integer-shift search on grayscale+building, as in training",
    "count_truth": "splat mass of the registered label window / splat integral (integer count away from edges)",
}


@dataclass
class EvalReport:
    miou: float
    miou_threshold: float
    miou_dilation: int
    count_r2: float
    count_mae: float
    height_ae: dict
    builtup_area_error: float
    builtup_area_threshold: float
    road_miou: float
    mean_registered_mse: float
    n_tiles: int
    header: dict = field(default_factory=lambda: dict(REPORT_HEADER))

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "miou": self.miou,
            "miou_threshold": self.miou_threshold,
            "miou_dilation": self.miou_dilation,
            "count_r2": self.count_r2,
            "count_mae": self.count_mae,
            "height_ae": self.height_ae,
            "builtup_area_error": self.builtup_area_error,
            "builtup_area_threshold": self.builtup_area_threshold,
            "road_miou": self.road_miou,
            "mean_registered_mse": self.mean_registered_mse,
            "n_tiles": self.n_tiles,
        }


@dataclass
class TilePack:
    """Per-tile evaluation artifacts feeding the metric aggregations."""

    building_conf: np.ndarray
    road_conf: np.ndarray
    centroid_pred: np.ndarray
    centroid_label: np.ndarray
    height_pred: np.ndarray
    height_label: np.ndarray
    building_label: np.ndarray
    road_label: np.ndarray
    grayscale_label: np.ndarray
    grayscale_pred: np.ndarray
    true_count: float
    registered_mse: float


def evaluate_tiles(
    model: StudentModel,
    dataset: Dataset,
    loss_cfg: lossmod.LossConfig,
    train_cfg: TrainConfig,
    hr_override_deg: tuple[float, float] | None = (0.0, 0.0),
    oracle_injection: bool = False,
    frame_mode: str = "window",
    against_ortho_truth: bool = False,
) -> list[TilePack]:
    """Forward + registration per tile, returning metric-ready crops.

    The model runs on a center crop of ``train_cfg.crop_lr``; metrics use
    the inner ``train_cfg.eval_center_crop_lr`` window. With
    ``against_ortho_truth`` the label channels are re-rasterized without
    the planted shift and viewing angle.
    """
    gamma = model.cfg.upscale_factor
    mx, my = loss_cfg.max_shift
    crop = train_cfg.crop_lr
    inner = train_cfg.eval_center_crop_lr
    packs = []
    for i in range(len(dataset)):
        stack = dataset.get_stack(i)
        lr_extent = stack.frames[0].bands.shape[0]
        y0 = (lr_extent - crop) // 2
        frames = crop_frames(select_window(stack, model.cfg.frames, frame_mode), y0, y0, crop)
        label = dataset.get_ortho_label(i) if against_ortho_truth else dataset.get_label(i)
        label_c = label.window(gamma * y0, gamma * y0, gamma * crop, gamma * crop, (mx, my))

        if oracle_injection:
            vals = lossmod.shift_and_crop(label_c, (0, 0)).stack().astype(np.float64)
            vals[:, :, CHANNEL_ORDER.index("height_m")] /= 100.0
            pred = Prediction(constant(vals[None]))
        else:
            pred = model.forward(frames, hr_incidence_override_deg=hr_override_deg, training=False)

        alignment = lossmod.register_translation(label_c, pred, loss_cfg)
        registered = lossmod.shift_and_crop(label_c, alignment.shift)

        # inner center crop, in HR pixels
        off = (crop - inner) // 2 * gamma
        sl = (slice(off, off + inner * gamma), slice(off, off + inner * gamma))

        # the tile's reference count: exactly what a perfect predictor of the
        # registered label would estimate (integer away from window edges)
        n_true = float(registered.centroid[sl].sum() / dataset.splat.integral)

        packs.append(
            TilePack(
                building_conf=pred.building[sl].astype(np.float64),
                road_conf=pred.road[sl].astype(np.float64),
                centroid_pred=pred.centroid[sl].astype(np.float64),
                centroid_label=registered.centroid[sl].astype(np.float64),
                height_pred=pred.height_m[sl].astype(np.float64),
                height_label=registered.height_m[sl].astype(np.float64),
                building_label=registered.building[sl] > 0.5,
                road_label=registered.road[sl] > 0.5,
                grayscale_label=registered.grayscale[sl].astype(np.float64),
                grayscale_pred=pred.grayscale[sl].astype(np.float64),
                true_count=n_true,
                registered_mse=alignment.mse,
            )
        )
    return packs


def report_from_tiles(packs: list[TilePack], splat_integral: float, sweep: SweepSpec = SweepSpec()) -> EvalReport:
    miou, thr, dil = miou_sweep([p.building_conf for p in packs], [p.building_label for p in packs], sweep)
    road_miou, _, _ = miou_sweep([p.road_conf for p in packs], [p.road_label for p in packs], sweep)

    cal = CountCalibration(splat_integral)
    estimates = [estimate_count(p.centroid_pred, cal) for p in packs]
    truths = [p.true_count for p in packs]
    r2, mae = count_metrics(estimates, truths)

    heights = height_error_stats(
        [p.height_pred for p in packs],
        [p.height_label for p in packs],
        [p.building_label for p in packs],
    )
    area_err, area_thr = builtup_area_error(
        [p.building_conf for p in packs], [p.building_label for p in packs], sweep.thresholds
    )
    return EvalReport(
        miou=miou,
        miou_threshold=thr,
        miou_dilation=dil,
        count_r2=r2,
        count_mae=mae,
        height_ae=heights,
        builtup_area_error=area_err,
        builtup_area_threshold=area_thr,
        road_miou=road_miou,
        mean_registered_mse=float(np.mean([p.registered_mse for p in packs])),
        n_tiles=len(packs),
    )


def evaluate_model(
    model: StudentModel,
    dataset: Dataset,
    loss_cfg: lossmod.LossConfig,
    train_cfg: TrainConfig,
    sweep: SweepSpec = SweepSpec(),
    **kw,
) -> tuple[EvalReport, list[TilePack]]:
    packs = evaluate_tiles(model, dataset, loss_cfg, train_cfg, **kw)
    report = report_from_tiles(packs, dataset.splat.integral, sweep)
    return report, packs
