"""Procedural scenes and exact high-resolution label rasterization.

A :class:`Scene` is a small vector world: rotated-rectangle building
footprints with heights, and road polylines. Rasterizing it yields the
five teacher label channels (building, road, centroid splats, height,
shaded grayscale) at fine resolution, with an alignment margin around the
model-output footprint. Because the geometry is exact, the labels double
as ground truth for every metric downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

CHANNEL_ORDER = ("building", "road", "centroid", "height_m", "grayscale")

# shading means for the grayscale channel; roofs brightest, roads mid-tone
_BACKGROUND_MEAN = 0.35
_ROAD_MEAN = 0.55
_ROOF_MEAN = 0.75
_SPECKLE_STD = 0.05


@dataclass(frozen=True)
class Building:
    cx: float
    cy: float
    width_m: float
    depth_m: float
    angle_deg: float
    height_m: float

    @property
    def bound_radius(self) -> float:
        return 0.5 * math.hypot(self.width_m, self.depth_m)


@dataclass(frozen=True)
class Road:
    points: tuple[tuple[float, float], ...]
    width_m: float


@dataclass(frozen=True)
class Scene:
    buildings: tuple[Building, ...]
    roads: tuple[Road, ...]
    extent_m: float
    seed: int

    def __post_init__(self):
        for b in self.buildings:
            if not (0.0 < b.height_m <= 100.0):
                raise ValueError(f"building height {b.height_m} outside (0, 100] m")


@dataclass(frozen=True)
class SceneConfig:
    """Sampling ranges for :func:`sample_scene`; all lengths in meters."""

    extent_m: float = 160.0
    presence_prob: float = 0.9
    count_range: tuple[int, int] = (1, 12)
    size_range_m: tuple[float, float] = (3.0, 30.0)
    aspect_range: tuple[float, float] = (0.6, 1.7)
    height_range_m: tuple[float, float] = (3.0, 15.0)
    cluster_prob: float = 0.35
    cluster_gap_m: tuple[float, float] = (0.6, 1.8)
    road_prob: float = 0.6
    road_count_range: tuple[int, int] = (1, 2)
    road_width_range_m: tuple[float, float] = (4.0, 8.0)
    axis_aligned_prob: float = 0.5

    def __post_init__(self):
        if self.extent_m < 48.0:
            raise ValueError(f"extent {self.extent_m} m below the 48 m minimum")
        for name in ("count_range", "size_range_m", "aspect_range", "height_range_m",
                     "cluster_gap_m", "road_count_range", "road_width_range_m"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"degenerate config: {name} has min {lo} > max {hi}")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise ValueError("presence_prob must be in [0, 1]")


@dataclass(frozen=True)
class SplatSpec:
    """Fixed-size Gaussian bump stamped at each building centroid."""

    sigma_px: float = 2.0
    amplitude: float = 1.0
    truncation_radius_px: float = 8.0

    @property
    def integral(self) -> float:
        """Continuous mass of one splat; the discrete stamp stays within 1%."""
        return self.amplitude * 2.0 * math.pi * self.sigma_px**2


@dataclass
class HighResLabelSet:
    """Per-pixel teacher channels at fine resolution, margin included.

    Arrays are (H + 2*margin_y, W + 2*margin_x) where H x W is the model
    output footprint; ``margin_px`` is (max_dx, max_dy) of the registration
    search window.
    """

    resolution_m: float
    margin_px: tuple[int, int]
    building: np.ndarray
    road: np.ndarray
    centroid: np.ndarray
    height_m: np.ndarray
    grayscale: np.ndarray
    splat: SplatSpec = field(default_factory=SplatSpec)

    @property
    def shape(self) -> tuple[int, int]:
        return self.building.shape

    def channels(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in CHANNEL_ORDER}

    def stack(self) -> np.ndarray:
        """(H, W, 5) array in CHANNEL_ORDER."""
        return np.stack([getattr(self, name) for name in CHANNEL_ORDER], axis=-1)

    def core(self) -> "HighResLabelSet":
        """Drop the margin, returning labels over the output footprint only."""
        mx, my = self.margin_px
        sl = (slice(my, self.shape[0] - my or None), slice(mx, self.shape[1] - mx or None))
        return HighResLabelSet(
            self.resolution_m,
            (0, 0),
            *(getattr(self, name)[sl].copy() for name in CHANNEL_ORDER),
            splat=self.splat,
        )

    def window(self, y0: int, x0: int, h: int, w: int, margin: tuple[int, int]) -> "HighResLabelSet":
        """Label crop covering core rows y0:y0+h, cols x0:x0+w plus a margin.

        (y0, x0) are core (margin-free) coordinates; the request must fit,
        margin included, inside this label's own margins.
        """
        mx, my = self.margin_px
        wx, wy = margin
        top, left = my + y0 - wy, mx + x0 - wx
        bot, right = my + y0 + h + wy, mx + x0 + w + wx
        if top < 0 or left < 0 or bot > self.shape[0] or right > self.shape[1]:
            raise ValueError(
                f"window ({y0}:{y0 + h}, {x0}:{x0 + w}) with margin {margin} escapes label of shape {self.shape}"
            )
        sl = (slice(top, bot), slice(left, right))
        return HighResLabelSet(
            self.resolution_m,
            (wx, wy),
            *(getattr(self, name)[sl].copy() for name in CHANNEL_ORDER),
            splat=self.splat,
        )


# ---------------------------------------------------------------------------
# Sampling


def sample_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Draw one deterministic scene; ~presence_prob of scenes have buildings."""
    rng = np.random.default_rng(seed)
    buildings: list[Building] = []
    extent = config.extent_m

    if rng.random() < config.presence_prob:
        lo, hi = config.count_range
        n = int(rng.integers(lo, hi + 1))
        attempts = 0
        while len(buildings) < n and attempts < n * 30:
            attempts += 1
            size_lo, size_hi = config.size_range_m
            w = float(np.exp(rng.uniform(np.log(size_lo), np.log(size_hi))))
            d = w * float(rng.uniform(*config.aspect_range))
            d = min(max(d, size_lo), size_hi)
            angle = 0.0 if rng.random() < config.axis_aligned_prob else float(rng.uniform(0.0, 90.0))
            h = float(rng.uniform(*config.height_range_m))
            r = 0.5 * math.hypot(w, d)
            if 2 * r >= extent:
                continue

            if buildings and rng.random() < config.cluster_prob:
                base = buildings[rng.integers(0, len(buildings))]
                gap = float(rng.uniform(*config.cluster_gap_m))
                theta = math.radians(float(rng.choice([0.0, 90.0, 180.0, 270.0])) + base.angle_deg)
                dist = 0.5 * base.width_m + 0.5 * w + gap
                cx = base.cx + dist * math.cos(theta)
                cy = base.cy + dist * math.sin(theta)
            else:
                cx = float(rng.uniform(r, extent - r))
                cy = float(rng.uniform(r, extent - r))
            if not (r <= cx <= extent - r and r <= cy <= extent - r):
                continue
            cand = Building(cx, cy, w, d, angle, h)
            # keep footprints from piling on top of each other, but allow near-touching
            if any(math.hypot(b.cx - cx, b.cy - cy) < 0.75 * (b.bound_radius + r) for b in buildings):
                continue
            buildings.append(cand)

    roads: list[Road] = []
    if rng.random() < config.road_prob:
        lo, hi = config.road_count_range
        for _ in range(int(rng.integers(lo, hi + 1))):
            width = float(rng.uniform(*config.road_width_range_m))
            vertical = bool(rng.random() < 0.5)
            offs = rng.uniform(0.15 * extent, 0.85 * extent, size=3)
            ts = np.linspace(0.0, extent, 3)
            pts = [(float(o), float(t)) if vertical else (float(t), float(o)) for t, o in zip(ts, offs)]
            roads.append(Road(tuple(pts), width))

    return Scene(tuple(buildings), tuple(roads), extent, seed)


def true_count(scene: Scene) -> int:
    return len(scene.buildings)


def translate(scene: Scene, dx_m: float, dy_m: float) -> Scene:
    """Shift all geometry; used to plant a label/imagery misalignment."""
    buildings = tuple(replace(b, cx=b.cx + dx_m, cy=b.cy + dy_m) for b in scene.buildings)
    roads = tuple(Road(tuple((x + dx_m, y + dy_m) for x, y in r.points), r.width_m) for r in scene.roads)
    return Scene(buildings, roads, scene.extent_m, scene.seed)


# ---------------------------------------------------------------------------
# Rasterization


def _pixel_centers(n_rows, n_cols, resolution_m, margin_px):
    mx, my = margin_px
    xs = (np.arange(n_cols) - mx + 0.5) * resolution_m
    ys = (np.arange(n_rows) - my + 0.5) * resolution_m
    return xs, ys


def _building_mask_window(b: Building, xs, ys, offset_xy=(0.0, 0.0)):
    """Boolean coverage mask over the footprint's bbox window (pixel-center rule)."""
    cx, cy = b.cx + offset_xy[0], b.cy + offset_xy[1]
    r = b.bound_radius
    j0 = int(np.searchsorted(xs, cx - r - 1.0))
    j1 = int(np.searchsorted(xs, cx + r + 1.0))
    i0 = int(np.searchsorted(ys, cy - r - 1.0))
    i1 = int(np.searchsorted(ys, cy + r + 1.0))
    if j0 >= j1 or i0 >= i1:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0), dtype=bool)
    gx, gy = np.meshgrid(xs[j0:j1] - cx, ys[i0:i1] - cy)
    a = math.radians(b.angle_deg)
    u = gx * math.cos(a) + gy * math.sin(a)
    v = -gx * math.sin(a) + gy * math.cos(a)
    mask = (np.abs(u) <= b.width_m / 2.0) & (np.abs(v) <= b.depth_m / 2.0)
    return slice(i0, i1), slice(j0, j1), mask


def _stamp_splat(canvas, px, py, spec: SplatSpec):
    """Add one truncated Gaussian splat centered at pixel coords (px, py)."""
    rad = spec.truncation_radius_px
    i0 = max(int(math.floor(py - rad)), 0)
    i1 = min(int(math.ceil(py + rad)) + 1, canvas.shape[0])
    j0 = max(int(math.floor(px - rad)), 0)
    j1 = min(int(math.ceil(px + rad)) + 1, canvas.shape[1])
    if i0 >= i1 or j0 >= j1:
        return
    jj, ii = np.meshgrid(np.arange(j0, j1) - px, np.arange(i0, i1) - py)
    r2 = ii**2 + jj**2
    g = spec.amplitude * np.exp(-r2 / (2.0 * spec.sigma_px**2))
    g[r2 > rad**2] = 0.0
    canvas[i0:i1, j0:j1] += g


def _road_mask(roads, xs, ys):
    mask = np.zeros((len(ys), len(xs)), dtype=bool)
    if not roads:
        return mask
    gx, gy = np.meshgrid(xs, ys)
    for road in roads:
        half = road.width_m / 2.0
        pts = road.points
        for (x1, y1), (x2, y2) in zip(pts[:-1], pts[1:]):
            dx, dy = x2 - x1, y2 - y1
            seg2 = dx * dx + dy * dy
            if seg2 == 0.0:
                continue
            t = np.clip(((gx - x1) * dx + (gy - y1) * dy) / seg2, 0.0, 1.0)
            dist2 = (gx - (x1 + t * dx)) ** 2 + (gy - (y1 + t * dy)) ** 2
            mask |= dist2 <= half * half
    return mask


def _roof_offsets(scene: Scene, incidence, resolution_m):
    """Per-building world-space displacement of roofs for a viewing angle.

    Roofs shift by height * tan(zenith) along the azimuth (clockwise from
    +y north); ground features stay put.
    """
    if incidence is None:
        return [(0.0, 0.0)] * len(scene.buildings)
    azimuth_deg, zenith_deg = incidence
    if not 0.0 <= zenith_deg <= 45.0:
        raise ValueError(f"zenith {zenith_deg} outside [0, 45] degrees")
    az = math.radians(azimuth_deg)
    t = math.tan(math.radians(zenith_deg))
    return [(b.height_m * t * math.sin(az), b.height_m * t * math.cos(az)) for b in scene.buildings]


def _rasterize(scene: Scene, resolution_m, margin_px, incidence=None, splat: SplatSpec = SplatSpec()):
    core = scene.extent_m / resolution_m
    if abs(core - round(core)) > 1e-9:
        raise ValueError(f"extent {scene.extent_m} m is not a whole number of {resolution_m} m pixels")
    mx, my = margin_px
    n_rows = int(round(core)) + 2 * my
    n_cols = int(round(core)) + 2 * mx
    xs, ys = _pixel_centers(n_rows, n_cols, resolution_m, margin_px)
    offsets = _roof_offsets(scene, incidence, resolution_m)

    building = np.zeros((n_rows, n_cols), dtype=np.float32)
    height = np.zeros((n_rows, n_cols), dtype=np.float32)
    centroid = np.zeros((n_rows, n_cols), dtype=np.float64)
    road = _road_mask(scene.roads, xs, ys).astype(np.float32)

    rng = np.random.default_rng((scene.seed, 0xA5))
    gray = np.full((n_rows, n_cols), _BACKGROUND_MEAN, dtype=np.float64)
    gray[road > 0] = _ROAD_MEAN

    for b, off in zip(scene.buildings, offsets):
        si, sj, mask = _building_mask_window(b, xs, ys, off)
        building[si, sj][mask] = 1.0
        hwin = height[si, sj]
        hwin[mask] = np.maximum(hwin[mask], b.height_m)
        roof_shade = _ROOF_MEAN + float(rng.uniform(-0.08, 0.08))
        gray[si, sj][mask] = roof_shade
        px = (b.cx + off[0]) / resolution_m - 0.5 + mx
        py = (b.cy + off[1]) / resolution_m - 0.5 + my
        _stamp_splat(centroid, px, py, splat)

    gray += rng.normal(0.0, _SPECKLE_STD, size=gray.shape)
    np.clip(gray, 0.0, 1.0, out=gray)

    return HighResLabelSet(
        resolution_m=resolution_m,
        margin_px=(mx, my),
        building=building,
        road=road,
        centroid=centroid.astype(np.float32),
        height_m=height,
        grayscale=gray.astype(np.float32),
        splat=splat,
    )


def rasterize_labels(
    scene: Scene,
    resolution_m: float = 0.5,
    margin_px: tuple[int, int] = (8, 8),
    splat: SplatSpec = SplatSpec(),
) -> HighResLabelSet:
    """Exact label channels for a scene; pixel counted as covered iff its center is."""
    if resolution_m <= 0:
        raise ValueError("resolution must be positive")
    return _rasterize(scene, resolution_m, margin_px, incidence=None, splat=splat)


def apply_parallax(
    labels: HighResLabelSet,
    scene: Scene,
    incidence: tuple[float, float],
) -> HighResLabelSet:
    """Re-render with each roof displaced by height * tan(zenith) along azimuth.

    Returns a new label set; roads and ground are unmoved. A zenith of 0
    reproduces the input exactly.
    """
    return _rasterize(scene, labels.resolution_m, labels.margin_px, incidence=incidence, splat=labels.splat)
