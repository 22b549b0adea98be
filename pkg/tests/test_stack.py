"""Stack simulation: degradation oracle, grooming rules, padding."""

import numpy as np
import pytest

from srstack import scene as sc
from srstack import stack as st


def zero_noise_config(**kw):
    base = dict(
        sub_pixel_shift_std_m=0.0,
        per_band_shift_m=((0.0, 0.0),) * 4,
        noise_std=0.0,
        cloud_probability=0.0,
        unflagged_cloud_probability=0.0,
        duplicate_probability=0.0,
        angle_jitter=0.0,
    )
    base.update(kw)
    return st.StackSimConfig(**base)


@pytest.fixture(scope="module")
def labels_and_scene():
    scene = sc.sample_scene(11, sc.SceneConfig(extent_m=160.0))
    return sc.rasterize_labels(scene), scene


def mk_frame(tid, baseline, time, cloudy_pixels=0, h=4, w=4, b=2):
    mask = np.zeros((h, w), dtype=bool)
    if cloudy_pixels:
        mask.ravel()[:cloudy_pixels] = True
    meta = st.FrameMeta(time, 0.1, 0.1, 0.1, 0.1, 0.5, 0.5, 0.0, 0.0, tid, baseline, mask)
    return st.Frame(np.full((h, w, b), float(tid), dtype=np.float32), meta)


# ---------------------------------------------------------------------------
# simulate_stack


def test_zero_randomness_matches_downsample_oracle(labels_and_scene):
    labels, scene = labels_and_scene
    frames = st.simulate_stack(labels, scene, 1, seed=5, config=zero_noise_config())
    assert len(frames) == 1
    gray = labels.core().grayscale.astype(np.float64)
    native = st.box_downsample(gray, 20)  # 0.5 m -> 10 m
    expected = st.resize_bilinear(native, 40, 40)  # 10 m -> 4 m grid
    for b in range(4):
        np.testing.assert_allclose(frames[0].bands[:, :, b], expected, atol=1e-5)


def test_simulate_stack_deterministic(labels_and_scene):
    labels, scene = labels_and_scene
    a = st.simulate_stack(labels, scene, 6, seed=9)
    b = st.simulate_stack(labels, scene, 6, seed=9)
    assert len(a) == len(b)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.bands, fb.bands)
        np.testing.assert_array_equal(fa.meta.scalars(), fb.meta.scalars())


def test_label_time_brackets_pivot_frames(labels_and_scene):
    labels, scene = labels_and_scene
    for t in (2, 8, 32):
        frames = st.simulate_stack(labels, scene, t, seed=3, config=zero_noise_config())
        pivot = -(-t // 2)
        assert frames[pivot - 1].meta.time_norm < 0.0 < frames[pivot].meta.time_norm


def test_times_strictly_increasing(labels_and_scene):
    labels, scene = labels_and_scene
    frames = st.simulate_stack(labels, scene, 12, seed=3, config=zero_noise_config())
    times = [f.meta.time_norm for f in frames]
    assert all(b > a for a, b in zip(times, times[1:]))


def test_no_temporal_signal_when_randomness_disabled(labels_and_scene):
    labels, scene = labels_and_scene
    frames = st.simulate_stack(labels, scene, 5, seed=2, config=zero_noise_config())
    for f in frames[1:]:
        np.testing.assert_array_equal(f.bands, frames[0].bands)
        # everything but acquisition time matches
        np.testing.assert_array_equal(f.meta.scalars()[1:], frames[0].meta.scalars()[1:])


def test_hr_incidence_identical_across_frames(labels_and_scene):
    labels, scene = labels_and_scene
    frames = st.simulate_stack(labels, scene, 6, seed=4, hr_incidence_deg=(123.0, 9.0))
    for f in frames:
        assert f.meta.hr_incidence_azimuth == pytest.approx(123.0 / 360.0)
        assert f.meta.hr_incidence_zenith == pytest.approx(9.0 / 90.0)


def test_duplicates_share_datatake_with_distinct_baselines(labels_and_scene):
    labels, scene = labels_and_scene
    cfg = st.StackSimConfig(duplicate_probability=1.0, cloud_probability=0.0)
    frames = st.simulate_stack(labels, scene, 4, seed=8, config=cfg)
    assert len(frames) == 8
    by_id = {}
    for f in frames:
        by_id.setdefault(f.meta.datatake_id, []).append(f.meta.processing_baseline)
    for baselines in by_id.values():
        assert len(baselines) == 2 and baselines[0] != baselines[1]


# ---------------------------------------------------------------------------
# dedup / cloud filter


def test_dedup_keeps_highest_baseline():
    frames = [mk_frame(0, 3, 0.0), mk_frame(0, 5, 0.1), mk_frame(1, 1, 0.2)]
    out = st.dedup_frames(frames)
    assert [(f.meta.datatake_id, f.meta.processing_baseline) for f in out] == [(0, 5), (1, 1)]


def test_dedup_identity_when_all_distinct():
    frames = [mk_frame(i, 2, i * 0.1) for i in range(4)]
    assert st.dedup_frames(frames) == frames


def test_dedup_tie_keeps_earliest():
    frames = [mk_frame(0, 2, 0.0), mk_frame(0, 2, 0.1)]
    out = st.dedup_frames(frames)
    assert len(out) == 1 and out[0].meta.time_norm == 0.0
    # and in the reversed presentation order too
    out = st.dedup_frames(frames[::-1])
    assert len(out) == 1 and out[0].meta.time_norm == 0.0


def test_cloud_filter_rules():
    clean = [mk_frame(0, 1, 0.0), mk_frame(1, 1, 0.1)]
    assert st.filter_opaque_clouds(clean) == clean
    one_bad = clean + [mk_frame(2, 1, 0.2, cloudy_pixels=1)]
    assert st.filter_opaque_clouds(one_bad) == clean
    all_bad = [mk_frame(i, 1, i * 0.1, cloudy_pixels=3) for i in range(3)]
    assert st.filter_opaque_clouds(all_bad) == []


def test_dedup_and_filter_randomized_properties():
    # idempotence + rule conformance over many random frame sequences
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(0, 12))
        frames = [
            mk_frame(
                int(rng.integers(0, 5)),
                int(rng.integers(1, 6)),
                float(i),
                cloudy_pixels=int(rng.integers(0, 3)),
            )
            for i in range(n)
        ]
        d1 = st.dedup_frames(frames)
        assert st.dedup_frames(d1) == d1
        ids = [f.meta.datatake_id for f in d1]
        assert len(set(ids)) == len(ids)
        for f in d1:
            group = [g for g in frames if g.meta.datatake_id == f.meta.datatake_id]
            best = max(g.meta.processing_baseline for g in group)
            assert f.meta.processing_baseline == best
            earliest = min(g.meta.time_norm for g in group if g.meta.processing_baseline == best)
            assert f.meta.time_norm == earliest
        c1 = st.filter_opaque_clouds(frames)
        assert st.filter_opaque_clouds(c1) == c1
        assert all(not f.meta.opaque_cloud.any() for f in c1)
        assert [f for f in frames if not f.meta.opaque_cloud.any()] == c1


# ---------------------------------------------------------------------------
# metadata encoding


def test_metadata_channel_count_and_planes():
    f = mk_frame(0, 1, 0.25, h=3, w=5, b=4)
    enc = st.encode_metadata_channels(f)
    assert enc.shape == (3, 5, 13)
    np.testing.assert_array_equal(enc[:, :, :4], f.bands)
    lat_plane = enc[:, :, 4 + st.METADATA_ORDER.index("latitude")]
    assert np.all(lat_plane == np.float32(0.5))
    for i in range(9):
        plane = enc[:, :, 4 + i]
        assert plane.min() == plane.max()


def test_metadata_difference_isolated_to_one_plane():
    a = mk_frame(0, 1, 0.25)
    b = mk_frame(0, 1, 0.50)
    ea, eb = st.encode_metadata_channels(a), st.encode_metadata_channels(b)
    diff = np.abs(ea - eb).sum(axis=(0, 1))
    t_idx = a.bands.shape[2] + st.METADATA_ORDER.index("time_norm")
    assert diff[t_idx] > 0
    assert np.all(diff[np.arange(len(diff)) != t_idx] == 0)


def test_metadata_missing_value_rejected():
    f = mk_frame(0, 1, 0.25)
    f.meta.latitude = float("nan")
    with pytest.raises(ValueError, match="latitude"):
        st.encode_metadata_channels(f)


# ---------------------------------------------------------------------------
# pad / truncate


def test_pad_truncate_identity_when_full():
    frames = [mk_frame(i, 1, (i - 16) * 0.001 + 0.0005) for i in range(32)]
    out = st.pad_truncate_stack(frames, 32, seed=1, p=0.0)
    assert len(out) == 32
    for a, b in zip(out.frames, frames):
        assert a is b


def test_pad_truncate_empty_gives_all_zero_stack():
    out = st.pad_truncate_stack([], 32, seed=1, p=0.0)
    assert len(out) == 32
    for f in out.frames:
        assert not f.bands.any()
        assert abs(f.meta.time_norm) < 1e-9
        assert not f.meta.opaque_cloud.any()


def test_pad_truncate_fills_short_stacks_outside_in():
    frames = [mk_frame(i, 1, (i - 3) * 0.001 + 0.0005) for i in range(6)]
    out = st.pad_truncate_stack(frames, 8, seed=0, p=0.0)
    assert len(out) == 8
    real = [f for f in out.frames if f.meta.datatake_id >= 0]
    assert len(real) == 6
    # the label time still falls between the two pivot frames
    times = [f.meta.time_norm for f in out.frames]
    assert times[3] < 0.0 < times[4]
    assert all(b > a for a, b in zip(times, times[1:]))


def test_pad_truncate_random_pads_within_bounds():
    frames = [mk_frame(i, 1, (i - 8) * 0.001 + 0.0005) for i in range(16)]
    lengths_l, lengths_r = [], []
    for seed in range(200):
        out = st.pad_truncate_stack(frames, 16, seed=seed, p=1.0)
        flags = [f.meta.datatake_id < 0 for f in out.frames]
        left = next((i for i, z in enumerate(flags[:8]) if not z), 8)
        right = next((i for i, z in enumerate(flags[8:][::-1]) if not z), 8)
        lengths_l.append(left)
        lengths_r.append(right)
        assert len(out) == 16
        # repeatable for a fixed seed
        again = st.pad_truncate_stack(frames, 16, seed=seed, p=1.0)
        assert [f.meta.datatake_id for f in again.frames] == [f.meta.datatake_id for f in out.frames]
    assert all(1 <= l <= 8 for l in lengths_l)
    assert all(1 <= r <= 8 for r in lengths_r)
    assert min(lengths_l) == 1 and max(lengths_l) == 8


def test_pad_truncate_rejects_odd_target():
    with pytest.raises(ValueError, match="even"):
        st.pad_truncate_stack([], 7)


def test_select_window_modes():
    frames = [mk_frame(i, 1, (i - 6) * 0.001 + 0.0005) for i in range(12)]
    stack = st.pad_truncate_stack(frames, 12, seed=0, p=0.0)
    win = st.select_window(stack, 8)
    assert len(win) == 8
    times = [f.meta.time_norm for f in win]
    assert times[3] < 0.0 < times[4]
    dup = st.select_window(stack, 8, mode="duplicate_center")
    assert len(dup) == 8
    assert all(f is dup[0] for f in dup)
    assert dup[0].meta.time_norm < 0.0  # the frame right before the label
    with pytest.raises(ValueError, match="unknown selection mode"):
        st.select_window(stack, 4, mode="median")
