"""Scene sampling and rasterization against geometric oracles."""

import math

import numpy as np
import pytest

from srstack import scene as sc


def one_building_scene(cx=80.0, cy=80.0, w=10.0, d=10.0, h=12.0, angle=0.0, extent=160.0, seed=3):
    return sc.Scene((sc.Building(cx, cy, w, d, angle, h),), (), extent, seed)


def test_sample_scene_deterministic():
    cfg = sc.SceneConfig()
    assert sc.sample_scene(42, cfg) == sc.sample_scene(42, cfg)


def test_forced_empty_scene():
    cfg = sc.SceneConfig(presence_prob=0.0)
    scene = sc.sample_scene(1, cfg)
    assert scene.buildings == ()
    assert sc.true_count(scene) == 0


def test_degenerate_config_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        sc.SceneConfig(size_range_m=(30.0, 3.0))


def test_building_presence_fraction():
    cfg = sc.SceneConfig()
    hits = sum(1 for s in range(10_000) if sc.sample_scene(s, cfg).buildings)
    assert 0.85 <= hits / 10_000 <= 0.95


def test_sizes_span_small_to_large_and_adjacency_occurs():
    cfg = sc.SceneConfig()
    widths, min_gaps = [], []
    for s in range(400):
        scene = sc.sample_scene(s, cfg)
        widths += [b.width_m for b in scene.buildings]
        for i, a in enumerate(scene.buildings):
            for b in scene.buildings[i + 1 :]:
                gap = math.hypot(a.cx - b.cx, a.cy - b.cy) - a.bound_radius - b.bound_radius
                min_gaps.append(gap)
    assert min(widths) < 5.0 and max(widths) > 20.0
    assert any(g < 2.0 for g in min_gaps)


def test_true_count_matches_constructor_and_is_additive():
    buildings = tuple(sc.Building(20.0 + 7 * i, 30.0, 4.0, 4.0, 0.0, 5.0) for i in range(17))
    scene = sc.Scene(buildings, (), 160.0, 0)
    assert sc.true_count(scene) == 17
    scenes = [sc.sample_scene(s) for s in range(50)]
    assert sum(sc.true_count(s) for s in scenes) == sum(len(s.buildings) for s in scenes)


# ---------------------------------------------------------------------------
# Rasterization


def test_empty_scene_rasterizes_to_zero_labels():
    labels = sc.rasterize_labels(sc.Scene((), (), 160.0, 5))
    assert labels.building.sum() == 0
    assert labels.road.sum() == 0
    assert labels.centroid.sum() == 0
    assert labels.height_m.sum() == 0
    assert labels.grayscale.mean() == pytest.approx(0.35, abs=0.01)


def test_building_area_pixel_center_rule():
    # 10 m x 10 m building at 0.5 m/px covers exactly 400 pixel centers
    labels = sc.rasterize_labels(one_building_scene(), resolution_m=0.5)
    assert labels.building.sum() == 400


def test_label_extents_include_margin():
    labels = sc.rasterize_labels(one_building_scene(extent=160.0), resolution_m=0.5, margin_px=(8, 8))
    assert labels.shape == (336, 336)
    assert labels.core().shape == (320, 320)


def test_centroid_sum_counts_buildings():
    spec = sc.SplatSpec()
    cfg = sc.SceneConfig()
    for seed in range(12):
        scene = sc.sample_scene(seed, cfg)
        labels = sc.rasterize_labels(scene, splat=spec)
        n = sc.true_count(scene)
        assert labels.centroid.sum() == pytest.approx(n * spec.integral, rel=0.01)


def test_splat_integral_matches_discrete_sum():
    spec = sc.SplatSpec(sigma_px=2.0, amplitude=1.0, truncation_radius_px=8.0)
    canvas = np.zeros((64, 64))
    sc._stamp_splat(canvas, 31.3, 32.7, spec)
    assert canvas.sum() == pytest.approx(spec.integral, rel=0.01)


def test_height_zero_exactly_where_building_zero():
    for seed in (0, 7, 19):
        labels = sc.rasterize_labels(sc.sample_scene(seed))
        np.testing.assert_array_equal(labels.height_m > 0, labels.building > 0)


def test_height_value_inside_footprint():
    labels = sc.rasterize_labels(one_building_scene(h=37.5))
    inside = labels.building > 0
    assert np.all(labels.height_m[inside] == np.float32(37.5))


def test_rasterization_translation_equivariant():
    base = one_building_scene(cx=60.0, cy=70.0)
    k_px, res = 6, 0.5
    shifted = sc.Scene(
        (sc.Building(60.0 + k_px * res, 70.0, 10.0, 10.0, 0.0, 12.0),),
        (),
        base.extent_m,
        base.seed,
    )
    la = sc.rasterize_labels(base, res)
    lb = sc.rasterize_labels(shifted, res)
    # compare interiors: channel of shifted scene equals base channel moved k px in x
    for name in ("building", "height_m", "centroid"):
        a = getattr(la, name)[:, 50:250]
        b = getattr(lb, name)[:, 50 + k_px : 250 + k_px]
        np.testing.assert_allclose(b, a, atol=1e-6)


# ---------------------------------------------------------------------------
# Parallax


def test_parallax_zero_zenith_is_identity():
    scene = one_building_scene(h=40.0)
    labels = sc.rasterize_labels(scene)
    out = sc.apply_parallax(labels, scene, (135.0, 0.0))
    for name in sc.CHANNEL_ORDER:
        np.testing.assert_array_equal(getattr(out, name), getattr(labels, name))


def center_of_mass(mask):
    ys, xs = np.nonzero(mask)
    return xs.mean(), ys.mean()


def test_parallax_shift_magnitude():
    # height 20 m, zenith 26.57 deg, 0.5 m/px -> ~20 px shift along azimuth
    scene = one_building_scene(h=20.0, cx=70.0, cy=90.0)
    labels = sc.rasterize_labels(scene)
    out = sc.apply_parallax(labels, scene, (90.0, 26.57))  # azimuth 90 = +x
    x0, y0 = center_of_mass(labels.building > 0)
    x1, y1 = center_of_mass(out.building > 0)
    expected = 20.0 * math.tan(math.radians(26.57)) / 0.5
    assert x1 - x0 == pytest.approx(expected, abs=0.2)
    assert y1 - y0 == pytest.approx(0.0, abs=0.2)


def test_parallax_opposite_azimuths_negate():
    scene = one_building_scene(h=30.0)
    offs_a = sc._roof_offsets(scene, (37.0, 20.0), 0.5)
    offs_b = sc._roof_offsets(scene, (217.0, 20.0), 0.5)
    np.testing.assert_allclose(offs_a, [(-ox, -oy) for ox, oy in offs_b], atol=1e-9)


def test_parallax_rejects_extreme_zenith():
    scene = one_building_scene()
    labels = sc.rasterize_labels(scene)
    with pytest.raises(ValueError, match="zenith"):
        sc.apply_parallax(labels, scene, (0.0, 60.0))


def test_roads_can_exist_without_buildings():
    cfg = sc.SceneConfig(presence_prob=0.0, road_prob=1.0)
    scene = sc.sample_scene(9, cfg)
    assert scene.buildings == () and scene.roads
    labels = sc.rasterize_labels(scene)
    assert labels.road.sum() > 0
