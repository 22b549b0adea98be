"""Low-resolution multi-frame stack simulation.

Degrades a high-resolution scene rendering into T frames of multi-band
imagery the way a revisit sensor would see it: per-frame sub-pixel
positioning jitter, per-band sensor-layout shifts, additive noise, cloud
cover, duplicate acquisitions that differ only in processing baseline, and
missing frames. Frames are sampled at the native 10 m resolution and then
resampled onto the 4 m model input grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import HighResLabelSet, Scene
from .tensor import bilinear_matrix

TEN_YEARS_S = 10.0 * 365.25 * 24 * 3600.0
DAY_S = 24 * 3600.0

# order of the broadcast metadata planes appended after the image bands
METADATA_ORDER = (
    "time_norm",
    "incidence_azimuth",
    "incidence_zenith",
    "solar_azimuth",
    "solar_zenith",
    "latitude",
    "longitude",
    "hr_incidence_azimuth",
    "hr_incidence_zenith",
)


def scale_azimuth(deg: float) -> float:
    return (deg % 360.0) / 360.0


def scale_zenith(deg: float) -> float:
    return deg / 90.0


@dataclass
class FrameMeta:
    """Nine scalar metadata values plus acquisition bookkeeping for one frame."""

    time_norm: float
    incidence_azimuth: float
    incidence_zenith: float
    solar_azimuth: float
    solar_zenith: float
    latitude: float
    longitude: float
    hr_incidence_azimuth: float
    hr_incidence_zenith: float
    datatake_id: int
    processing_baseline: int
    opaque_cloud: np.ndarray

    def scalars(self) -> np.ndarray:
        vals = [getattr(self, name) for name in METADATA_ORDER]
        for name, v in zip(METADATA_ORDER, vals):
            if v is None or not math.isfinite(float(v)):
                raise ValueError(f"metadata value {name!r} is missing or non-finite")
        return np.asarray(vals, dtype=np.float64)


@dataclass
class Frame:
    bands: np.ndarray  # (H, W, B) on the 4 m grid
    meta: FrameMeta


@dataclass
class LowResStack:
    frames: list[Frame]
    grid_resolution_m: float = 4.0
    native_resolution_m: float = 10.0

    def __post_init__(self):
        if len(self.frames) > 32:
            raise ValueError("stacks are limited to 32 frames")
        shapes = {f.bands.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames disagree on shape: {shapes}")
        times = [f.meta.time_norm for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frame times must be strictly increasing")
        ids = [f.meta.datatake_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("retained frames must have unique datatake ids")

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class StackSimConfig:
    sub_pixel_shift_std_m: float = 2.0
    per_band_shift_m: tuple[tuple[float, float], ...] = ((0.0, 0.0), (3.0, 1.0), (-1.0, 3.0), (2.0, -2.0))
    noise_std: float = 0.08
    cloud_probability: float = 0.15
    unflagged_cloud_probability: float = 0.0
    duplicate_probability: float = 0.1
    band_count: int = 4
    pad_probability: float = 0.3
    angle_jitter: float = 0.02
    grid_resolution_m: float = 4.0
    native_resolution_m: float = 10.0

    def __post_init__(self):
        for name in ("cloud_probability", "unflagged_cloud_probability", "duplicate_probability", "pad_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.band_count < 1:
            raise ValueError("band_count must be >= 1")
        if len(self.per_band_shift_m) < self.band_count:
            raise ValueError("per_band_shift_m must cover every band")


# ---------------------------------------------------------------------------
# numpy image helpers (shared with dataset generation, not differentiable)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    my = bilinear_matrix(img.shape[0], out_h)
    mx = bilinear_matrix(img.shape[1], out_w)
    return my @ img @ mx.T


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image shape {img.shape} not divisible by box factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def shift_bilinear(img: np.ndarray, dx_px: float, dy_px: float) -> np.ndarray:
    """Sample img at (y - dy, x - dx) with bilinear weights, edges clamped."""
    h, w = img.shape
    ys = np.clip(np.arange(h) - dy_px, 0.0, h - 1.0)
    xs = np.clip(np.arange(w) - dx_px, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _cloud_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Soft blobby cloud opacity in [0, 1]."""
    field = np.zeros((h, w))
    gy, gx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.12, 0.45) * min(h, w)
        d2 = (gy - cy) ** 2 + (gx - cx) ** 2
        field += np.exp(-d2 / (2 * r * r))
    return np.clip(field, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Simulation


def simulate_stack(
    labels: HighResLabelSet,
    scene: Scene,
    t: int,
    seed: int,
    config: StackSimConfig = StackSimConfig(),
    hr_incidence_deg: tuple[float, float] = (0.0, 0.0),
) -> list[Frame]:
    """Render T raw frames (pre-dedup, pre-filter), times centered on the label.

    The label acquisition time is the origin: frames ceil(T/2) and
    ceil(T/2)+1 straddle time zero. ``hr_incidence_deg`` is the viewing
    angle the label was rendered with; it lands in the two hr metadata
    planes of every frame.
    """
    if t < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng((seed, 0x57AC))
    gray = labels.core().grayscale.astype(np.float64)
    hr_res = labels.resolution_m
    native_factor = int(round(config.native_resolution_m / hr_res))
    n_h, n_w = gray.shape[0] // native_factor, gray.shape[1] // native_factor
    lr_h = int(round(gray.shape[0] * hr_res / config.grid_resolution_m))
    lr_w = int(round(gray.shape[1] * hr_res / config.grid_resolution_m))

    # acquisition times: ~5 day cadence, label time = 0 between pivot frames
    gaps = np.maximum(rng.normal(5.0, 2.0, size=max(t, 2)), 1.0) * DAY_S
    pivot = -(-t // 2)  # ceil(T/2), 1-indexed frame just before the label
    u = rng.uniform(0.2, 0.8)
    times = np.zeros(t)
    if t >= 1:
        times[pivot - 1] = -u * gaps[0]
    for k in range(pivot - 2, -1, -1):
        times[k] = times[k + 1] - gaps[k + 1]
    for k in range(pivot, t):
        times[k] = times[k - 1] + gaps[k]

    base = {
        "incidence_azimuth": rng.uniform(0, 360),
        "incidence_zenith": rng.uniform(0, 12),
        "solar_azimuth": rng.uniform(0, 360),
        "solar_zenith": rng.uniform(20, 60),
    }
    lat, lon = rng.uniform(-60, 60), rng.uniform(-180, 180)
    hr_az, hr_zen = hr_incidence_deg

    frames: list[Frame] = []
    next_id = 0
    for k in range(t):
        jit = rng.normal(0.0, 1.0, size=4) * config.angle_jitter
        shift = rng.normal(0.0, 1.0, size=2) * config.sub_pixel_shift_std_m

        cloud_roll = rng.random()
        cloudy = cloud_roll < config.cloud_probability
        unflagged = (not cloudy) and cloud_roll < config.cloud_probability + config.unflagged_cloud_probability
        cloud_native = _cloud_field(rng, n_h, n_w) if (cloudy or unflagged) else None

        noise = rng.normal(0.0, 1.0, size=(n_h, n_w, config.band_count)) * config.noise_std
        duplicate = rng.random() < config.duplicate_probability
        baselines = list(rng.choice(9, size=2, replace=False) + 1) if duplicate else [int(rng.integers(1, 10))]

        for which, baseline in enumerate(baselines):
            bands = np.empty((lr_h, lr_w, config.band_count), dtype=np.float32)
            for b in range(config.band_count):
                bx, by = config.per_band_shift_m[b]
                dx_px = (shift[0] + bx) / hr_res
                dy_px = (shift[1] + by) / hr_res
                native = box_downsample(shift_bilinear(gray, dx_px, dy_px), native_factor)
                if cloud_native is not None:
                    native = native + 0.6 * cloud_native
                native = native + noise[:, :, b] * (1.0 if which == 0 else 0.98)
                bands[:, :, b] = resize_bilinear(native, lr_h, lr_w)
            if cloudy:
                mask = resize_bilinear(cloud_native, lr_h, lr_w) > 0.1
            else:
                mask = np.zeros((lr_h, lr_w), dtype=bool)
            meta = FrameMeta(
                time_norm=(times[k] + which * 30.0) / TEN_YEARS_S,
                incidence_azimuth=scale_azimuth(base["incidence_azimuth"] + jit[0] * 360.0),
                incidence_zenith=min(max(scale_zenith(base["incidence_zenith"]) + jit[1], 0.0), 1.0),
                solar_azimuth=scale_azimuth(base["solar_azimuth"] + jit[2] * 360.0),
                solar_zenith=min(max(scale_zenith(base["solar_zenith"]) + jit[3], 0.0), 1.0),
                latitude=(lat + 90.0) / 180.0,
                longitude=(lon + 180.0) / 360.0,
                hr_incidence_azimuth=scale_azimuth(hr_az),
                hr_incidence_zenith=scale_zenith(hr_zen),
                datatake_id=next_id,
                processing_baseline=int(baseline),
                opaque_cloud=mask,
            )
            frames.append(Frame(bands, meta))
        next_id += 1
    return frames


# ---------------------------------------------------------------------------
# Stack grooming


def dedup_frames(frames: list[Frame]) -> list[Frame]:
    """One frame per datatake id: highest processing baseline, earliest on ties."""
    best: dict[int, int] = {}
    for idx, f in enumerate(frames):
        key = f.meta.datatake_id
        if key not in best:
            best[key] = idx
            continue
        cur = frames[best[key]]
        better = f.meta.processing_baseline > cur.meta.processing_baseline
        if better:
            best[key] = idx
        elif f.meta.processing_baseline == cur.meta.processing_baseline:
            if f.meta.time_norm < cur.meta.time_norm:
                best[key] = idx
    keep = set(best.values())
    return [f for i, f in enumerate(frames) if i in keep]


def filter_opaque_clouds(frames: list[Frame]) -> list[Frame]:
    """Drop every frame with one or more pixels flagged in the opaque cloud mask."""
    return [f for f in frames if not bool(f.meta.opaque_cloud.any())]


def encode_metadata_channels(frame: Frame) -> np.ndarray:
    """Bands followed by the nine broadcast metadata planes: (H, W, B+9)."""
    h, w, _ = frame.bands.shape
    scalars = frame.meta.scalars().astype(frame.bands.dtype)
    planes = np.broadcast_to(scalars, (h, w, len(METADATA_ORDER)))
    return np.concatenate([frame.bands, planes], axis=2)


def _zero_frame(template: Frame, time_norm: float, pad_id: int) -> Frame:
    meta = FrameMeta(
        time_norm=time_norm,
        incidence_azimuth=0.0,
        incidence_zenith=0.0,
        solar_azimuth=0.0,
        solar_zenith=0.0,
        latitude=0.0,
        longitude=0.0,
        hr_incidence_azimuth=0.0,
        hr_incidence_zenith=0.0,
        datatake_id=pad_id,
        processing_baseline=0,
        opaque_cloud=np.zeros(template.meta.opaque_cloud.shape, dtype=bool),
    )
    return Frame(np.zeros_like(template.bands), meta)


def _mean_gap(times: np.ndarray) -> float:
    if len(times) >= 2:
        return float(np.diff(times).mean())
    return 5.0 * DAY_S / TEN_YEARS_S


def pad_truncate_stack(
    frames: list[Frame],
    target_t: int = 32,
    seed: int = 0,
    p: float = 0.0,
    grid_resolution_m: float = 4.0,
    native_resolution_m: float = 10.0,
) -> LowResStack:
    """Produce a stack of exactly ``target_t`` frames.

    Overlong stacks are center-cropped around the label time; short ones are
    filled with zero-frames from the outside inward (time extrapolated at
    the mean cadence). Then, independently per half with probability ``p``,
    the outermost l ~ U{1..target_t/2} frames are replaced by zero-frames --
    the missing-frame training augmentation.
    """
    if target_t % 2:
        raise ValueError("target stack length must be even")
    rng = np.random.default_rng((seed, 0xBAD))
    frames = sorted(frames, key=lambda f: f.meta.time_norm)

    if not frames:
        shape_hint = (1, 1, 1)
        template = Frame(
            np.zeros(shape_hint, dtype=np.float32),
            FrameMeta(0, 0, 0, 0, 0, 0, 0, 0, 0, -1, 0, np.zeros((1, 1), dtype=bool)),
        )
        out = [_zero_frame(template, 0.0, -(i + 1)) for i in range(target_t)]
        # keep times strictly increasing even for the fully degenerate stack
        for i, f in enumerate(out):
            f.meta.time_norm = (i - target_t / 2) * 1e-12
        return LowResStack(out, grid_resolution_m, native_resolution_m)

    times = np.array([f.meta.time_norm for f in frames])
    gap = _mean_gap(times)
    i_pos = int(np.searchsorted(times, 0.0, side="right"))  # first frame after label

    if len(frames) > target_t:
        k = min(max(i_pos - target_t // 2, 0), len(frames) - target_t)
        frames = frames[k : k + target_t]
        times = times[k : k + target_t]
        i_pos = int(np.searchsorted(times, 0.0, side="right"))

    missing = target_t - len(frames)
    pad_left = min(max(target_t // 2 - i_pos, 0), missing)
    pad_right = missing - pad_left
    template = frames[0]
    left = [
        _zero_frame(template, float(times[0] - gap * (pad_left - i)), -(i + 1))
        for i in range(pad_left)
    ]
    right = [
        _zero_frame(template, float(times[-1] + gap * (i + 1)), -(pad_left + i + 1))
        for i in range(pad_right)
    ]
    out = left + list(frames) + right

    # random truncate/pad per half
    half = target_t // 2
    for side in ("left", "right"):
        roll = rng.random()
        length = int(rng.integers(1, half + 1))
        if roll < p:
            if side == "left":
                anchor = out[length].meta.time_norm
                for i in range(length):
                    out[i] = _zero_frame(template, anchor - gap * (length - i), -(target_t + i + 1))
            else:
                anchor = out[target_t - length - 1].meta.time_norm
                for i in range(length):
                    out[target_t - length + i] = _zero_frame(
                        template, anchor + gap * (i + 1), -(2 * target_t + i + 1)
                    )

    # guard against time ties introduced by extrapolation
    for a, b in zip(out, out[1:]):
        if b.meta.time_norm <= a.meta.time_norm:
            b.meta.time_norm = a.meta.time_norm + 1e-12
    return LowResStack(out, grid_resolution_m, native_resolution_m)


# ---------------------------------------------------------------------------
# Frame-window selection for the timeframe-count experiments


def select_window(stack: LowResStack, t: int, mode: str = "window") -> list[Frame]:
    """Pick the model's T input frames from a stored stack.

    'window' keeps the T center-most frames (label stays between frames
    ceil(T/2) and ceil(T/2)+1); 'duplicate_center' repeats the frame right
    before the label time T times -- the no-temporal-diversity ablation.
    """
    frames = stack.frames
    if t > len(frames):
        raise ValueError(f"requested {t} frames from a stack of {len(frames)}")
    times = [f.meta.time_norm for f in frames]
    i_pos = int(np.searchsorted(times, 0.0, side="right"))
    if mode == "duplicate_center":
        center = frames[max(i_pos - 1, 0)]
        return [center] * t
    if mode != "window":
        raise ValueError(f"unknown selection mode {mode!r}")
    k = min(max(i_pos - t // 2, 0), len(frames) - t)
    return list(frames[k : k + t])
