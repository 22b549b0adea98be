"""Focal KLD values, registration recovery, and multi-task aggregation."""

import numpy as np
import pytest

from srstack import tensor as T
from srstack import loss as L
from srstack.model import Prediction
from srstack.scene import CHANNEL_ORDER, HighResLabelSet, SplatSpec

EPS_FLOOR = (1e-7) ** 0.25  # = 10**-1.75


def mk_label(arrays: dict, margin=(4, 4), resolution=0.5) -> HighResLabelSet:
    shape = next(iter(arrays.values())).shape
    chans = {name: arrays.get(name, np.zeros(shape, dtype=np.float32)) for name in CHANNEL_ORDER}
    return HighResLabelSet(resolution, margin, **chans, splat=SplatSpec())


def mk_pred(values: np.ndarray) -> Prediction:
    """Prediction wrapper around fixed channel values (H, W, 5)."""
    return Prediction(T.constant(values[None].astype(np.float64)))


def pred_from_channels(channels: dict, shape) -> Prediction:
    vals = np.zeros(shape + (5,), dtype=np.float64)
    for name, arr in channels.items():
        vals[:, :, CHANNEL_ORDER.index(name)] = arr
    return mk_pred(vals)


# ---------------------------------------------------------------------------
# focal KLD


def test_loss_floor_identical_inputs():
    got = L.focal_kld(np.array([0.5]), np.array([0.5]))
    assert got[0] == pytest.approx(EPS_FLOOR, abs=1e-9)
    assert EPS_FLOOR == pytest.approx(1.7782794100389228e-2, abs=1e-12)


def test_loss_floor_perfect_confidence():
    got = L.focal_kld(np.array([1.0]), np.array([1.0 - 1e-7]))
    assert got[0] == pytest.approx(EPS_FLOOR, abs=1e-9)


def test_loss_monotone_in_miss_distance():
    y = np.array([0.9])
    assert L.focal_kld(y, np.array([0.5]))[0] > L.focal_kld(y, np.array([0.8]))[0]


def test_loss_floor_is_global_minimum():
    rng = np.random.default_rng(0)
    y = rng.random((16, 16))
    y_hat = rng.random((16, 16))
    vals = L.focal_kld(y, y_hat)
    assert (vals >= EPS_FLOOR - 1e-12).all()
    equal = L.focal_kld(y, y.copy())
    np.testing.assert_allclose(equal, EPS_FLOOR, atol=1e-12)


def test_graph_twin_matches_numeric():
    rng = np.random.default_rng(1)
    y = rng.random((1, 6, 7, 5))
    y_hat = rng.random((1, 6, 7, 5))
    node = L.focal_kld_node(y, T.constant(y_hat))
    np.testing.assert_allclose(node.value, L.focal_kld(y, y_hat), rtol=1e-12)


def test_graph_twin_gradient():
    rng = np.random.default_rng(2)
    y = rng.random((1, 4, 4, 2))
    p = T.parameter(rng.uniform(0.05, 0.95, size=(1, 4, 4, 2)))

    def build(node):
        return T.mean_all(L.focal_kld_node(y, node))

    assert T.finite_diff_check(build, p, step=1e-5, samples_per_param=8) <= 1e-6


def test_degenerate_config_rejected():
    with pytest.raises(ValueError, match="epsilon"):
        L.LossConfig(epsilon=0.7)
    with pytest.raises(ValueError, match="focal"):
        L.LossConfig(focal_gamma=0.0)
    with pytest.raises(ValueError, match="unknown channel"):
        L.LossConfig(registration_channels=("veg",))


# ---------------------------------------------------------------------------
# Registration


def planted_pair(dx, dy, margin=(4, 4), h=24, w=24, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    pred_vals = rng.random((h, w, 5))
    mx, my = margin
    arrays = {}
    for i, name in enumerate(CHANNEL_ORDER):
        lab = np.zeros((h + 2 * my, w + 2 * mx), dtype=np.float64)
        lab[my + dy : my + dy + h, mx + dx : mx + dx + w] = pred_vals[:, :, i]
        if noise:
            lab += rng.normal(0.0, noise, size=lab.shape)
        arrays[name] = lab.astype(np.float32)
    return mk_pred(pred_vals), mk_label(arrays, margin)


def test_registration_recovers_planted_shift():
    pred, label = planted_pair(3, -2)
    al = L.register_translation(label, pred, L.LossConfig(max_shift=(4, 4)))
    assert al.shift == (3, -2)
    assert al.mse == pytest.approx(0.0, abs=1e-12)


def test_registration_all_tie_picks_zero():
    h, w, m = 12, 12, 4
    pred = pred_from_channels({"building": np.full((h, w), 0.3)}, (h, w))
    label = mk_label({"building": np.full((h + 2 * m, w + 2 * m), 0.7, dtype=np.float32)}, (m, m))
    al = L.register_translation(label, pred, L.LossConfig(max_shift=(m, m)))
    assert al.shift == (0, 0)


def test_registration_full_window_sweep():
    cfg = L.LossConfig(max_shift=(4, 4))
    for dy in range(-4, 5):
        for dx in range(-4, 5):
            pred, label = planted_pair(dx, dy, seed=1000 + dx + 9 * dy, noise=1e-4)
            al = L.register_translation(label, pred, cfg)
            assert al.shift == (dx, dy), f"planted ({dx},{dy}) got {al.shift}"


def test_registration_margin_too_small_rejected():
    pred, label = planted_pair(0, 0, margin=(2, 2))
    with pytest.raises(ValueError, match="margins"):
        L.register_translation(label, pred, L.LossConfig(max_shift=(4, 4)))


def test_shift_and_crop_center_and_extents():
    pred, label = planted_pair(0, 0, margin=(4, 4), h=16, w=20)
    for shift in ((0, 0), (4, -4), (-3, 2)):
        out = L.shift_and_crop(label, shift)
        assert out.shape == (16, 20)
        assert out.margin_px == (0, 0)
    center = L.shift_and_crop(label, (0, 0))
    np.testing.assert_array_equal(center.building, label.building[4:20, 4:24])


def test_shift_and_crop_involution_on_interior():
    rng = np.random.default_rng(3)
    big = rng.random((40, 40)).astype(np.float32)
    label = mk_label({"building": big}, margin=(6, 6))
    a = L.shift_and_crop(label, (2, -3)).building
    np.testing.assert_array_equal(a, big[6 - 3 : 34 - 3, 6 + 2 : 34 + 2])


def test_shift_outside_margin_rejected():
    pred, label = planted_pair(0, 0)
    with pytest.raises(ValueError, match="outside margins"):
        L.shift_and_crop(label, (5, 0))


# ---------------------------------------------------------------------------
# Multi-task loss


def test_perfect_prediction_hits_weighted_floor():
    pred, label = planted_pair(0, 0)
    registered = L.shift_and_crop(label, (0, 0))
    # prediction == registered label (height compared in /100 space)
    vals = registered.stack().astype(np.float64)
    vals[:, :, CHANNEL_ORDER.index("height_m")] /= 100.0
    cfg = L.LossConfig()
    loss = L.multitask_loss(mk_pred(vals), registered, has_height=True, cfg=cfg)
    expected = sum(cfg.weight(n) for n in CHANNEL_ORDER) * EPS_FLOOR
    assert float(loss.value) == pytest.approx(expected, rel=1e-9)


def test_missing_height_zeroes_its_gradient():
    pred, label = planted_pair(0, 0)
    registered = L.shift_and_crop(label, (0, 0))
    p = T.parameter(np.full((1, 24, 24, 5), 0.4))
    loss = L.multitask_loss(Prediction(p), registered, has_height=False)
    T.backprop(loss)
    hi = CHANNEL_ORDER.index("height_m")
    assert not p.grad[:, :, :, hi].any()
    others = [i for i in range(5) if i != hi]
    assert p.grad[:, :, :, others].any()


def test_task_weight_linearity():
    pred, label = planted_pair(0, 0, seed=5)
    registered = L.shift_and_crop(label, (0, 0))
    base = L.LossConfig()
    doubled = L.LossConfig(task_weights=tuple((n, 2.0 if n == "road" else 1.0) for n in CHANNEL_ORDER))
    p = T.parameter(np.full((1, 24, 24, 5), 0.4))
    l0 = float(L.multitask_loss(Prediction(p), registered, True, base).value)
    l1 = float(L.multitask_loss(Prediction(p), registered, True, doubled).value)
    only_road = L.LossConfig(task_weights=(("road", 1.0),))
    road_term = float(L.multitask_loss(Prediction(p), registered, True, only_road).value)
    assert l1 - l0 == pytest.approx(road_term, rel=1e-9)


def test_loss_invariant_to_common_shift():
    # a compact blob translated by the same in-window shift in BOTH the label
    # and the prediction scores identically: registration absorbs the shift
    rng = np.random.default_rng(9)
    h, w, m = 16, 16, 3
    blob = rng.uniform(0.2, 0.9, size=(6, 6, 5))
    cfg = L.LossConfig(max_shift=(m, m))

    losses, shifts = [], []
    for sx, sy in ((0, 0), (2, -1), (-3, 3)):
        pv = np.zeros((h, w, 5))
        pv[5 + sy : 11 + sy, 5 + sx : 11 + sx, :] = blob
        lab = np.zeros((h + 2 * m, w + 2 * m, 5), dtype=np.float32)
        lab[m + 5 + sy : m + 11 + sy, m + 5 + sx : m + 11 + sx, :] = blob * 0.9
        label = mk_label({n: lab[:, :, i] for i, n in enumerate(CHANNEL_ORDER)}, margin=(m, m))
        loss, al = L.registered_loss(mk_pred(pv), label, True, cfg)
        losses.append(float(loss.value))
        shifts.append(al.shift)
    assert shifts == [(0, 0)] * 3  # both moved together, so no relative shift
    assert losses[1] == pytest.approx(losses[0], rel=1e-9)
    assert losses[2] == pytest.approx(losses[0], rel=1e-9)

    # and translating ONLY the label is absorbed by the recovered shift
    pv = np.zeros((h, w, 5))
    pv[5:11, 5:11, :] = blob
    base = None
    for sx, sy in ((0, 0), (1, -2), (-3, 3)):
        lab = np.zeros((h + 2 * m, w + 2 * m, 5), dtype=np.float32)
        lab[m + 5 + sy : m + 11 + sy, m + 5 + sx : m + 11 + sx, :] = blob * 0.9
        label = mk_label({n: lab[:, :, i] for i, n in enumerate(CHANNEL_ORDER)}, margin=(m, m))
        loss, al = L.registered_loss(mk_pred(pv), label, True, cfg)
        assert al.shift == (sx, sy)
        if base is None:
            base = float(loss.value)
        else:
            assert float(loss.value) == pytest.approx(base, rel=1e-9)
