"""Box geometry against hand values, a sampling oracle, and the autodiff route."""

import numpy as np
import pytest

from cft import autodiff as ad
from cft import boxes as bx

from oracles import mc_iou_giou


def rand_box(rng) -> bx.BoxNorm:
    w, h = rng.uniform(0.05, 0.7, size=2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return bx.cs_to_corners(bx.BoxCS(cx, cy, w, h))


def test_corner_center_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = rand_box(rng)
        back = bx.cs_to_corners(bx.corners_to_cs(b))
        assert max(abs(u - v) for u, v in zip(b.as_tuple(), back.as_tuple())) <= 1e-7
        c = bx.BoxCS(*rng.uniform(0.2, 0.8, size=2), *rng.uniform(0.05, 0.4, size=2))
        back_c = bx.corners_to_cs(bx.cs_to_corners(c))
        assert max(abs(u - v) for u, v in zip(c.as_tuple(), back_c.as_tuple())) <= 1e-7


def test_degenerate_boxes_rejected():
    with pytest.raises(ValueError):
        bx.BoxNorm(0.5, 0.1, 0.5, 0.9)  # zero width
    with pytest.raises(ValueError):
        bx.BoxNorm(0.1, 0.8, 0.9, 0.2)  # inverted y
    with pytest.raises(ValueError):
        bx.BoxCS(0.5, 0.5, 0.0, 0.1)


def test_iou_hand_values():
    unit = bx.BoxNorm(0.0, 0.0, 1.0, 1.0)
    assert bx.iou(unit, unit) == 1.0
    a = bx.BoxNorm(0.0, 0.0, 0.5, 0.5)
    b = bx.BoxNorm(0.25, 0.25, 0.75, 0.75)
    # inter 0.0625, union 0.4375
    assert abs(bx.iou(a, b) - 1.0 / 7.0) < 1e-12
    disjoint = bx.BoxNorm(0.6, 0.6, 0.9, 0.9)
    assert bx.iou(a, disjoint) == 0.0


def test_giou_basics():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a, b = rand_box(rng), rand_box(rng)
        i, g = bx.iou(a, b), bx.giou(a, b)
        assert -1.0 <= g <= i <= 1.0
    same = rand_box(rng)
    assert bx.giou(same, same) == bx.iou(same, same) == 1.0
    # disjoint corner boxes: iou 0, strong enclosing penalty
    a = bx.BoxNorm(0.0, 0.0, 0.1, 0.1)
    b = bx.BoxNorm(0.9, 0.9, 1.0, 1.0)
    assert bx.iou(a, b) == 0.0
    assert bx.giou(a, b) < -0.9


def test_iou_giou_match_sampling_oracle():
    rng = np.random.default_rng(2)
    for k in range(25):
        a, b = rand_box(rng), rand_box(rng)
        mi, mg = mc_iou_giou(a.as_tuple(), b.as_tuple(), seed=k)
        assert abs(bx.iou(a, b) - mi) < 1e-3
        assert abs(bx.giou(a, b) - mg) < 1e-3


def test_detection_loss_zero_at_match():
    b = bx.BoxNorm(0.2, 0.3, 0.6, 0.8)
    assert bx.detection_loss(b, b) == 0.0
    shifted = bx.BoxNorm(0.25, 0.3, 0.65, 0.8)
    assert bx.detection_loss(shifted, b) > 0.0


def test_grounding_error_boundary_is_strict():
    # iou of these two is exactly 0.1 in float arithmetic
    a = bx.BoxNorm(0.0, 0.0, 0.1, 1.0)
    b = bx.BoxNorm(0.0, 0.0, 1.0, 1.0)
    assert bx.iou(a, b) == 0.1
    assert bx.classify_grounding_error(a, b, tau=0.1) is False
    slightly_less = bx.BoxNorm(0.0, 0.0, 0.0999, 1.0)
    assert bx.classify_grounding_error(slightly_less, b, tau=0.1) is True
    assert bx.classify_grounding_error(a, b, tau=0.2) is True


def test_crop_zoom_plain_box():
    spec = bx.crop_zoom(bx.BoxNorm(0.4, 0.4, 0.6, 0.6), (1000, 1000))
    assert spec.rect_px == (400.0, 400.0, 600.0, 600.0)
    assert spec.output_size == (448, 448)
    assert abs(spec.scale_factor - 2.24) < 1e-12


def test_crop_zoom_expands_tiny_box():
    # 10x10 px centered box, forced up to 128 px
    b = bx.BoxNorm(0.495, 0.495, 0.505, 0.505)
    spec = bx.crop_zoom(b, (1000, 1000), min_side=128)
    x1, y1, x2, y2 = spec.rect_px
    assert abs((x2 - x1) - 128) < 1e-9 and abs((y2 - y1) - 128) < 1e-9
    assert abs((x1 + x2) / 2 - 500) < 1e-9
    assert spec.output_size == (448, 448)
    assert abs(spec.scale_factor - 448 / 128) < 1e-12


def test_crop_zoom_shifts_inside_at_border():
    b = bx.BoxNorm(0.0, 0.0, 0.01, 0.01)
    spec = bx.crop_zoom(b, (1000, 1000), min_side=128)
    x1, y1, x2, y2 = spec.rect_px
    assert x1 == 0.0 and y1 == 0.0
    assert abs(x2 - 128) < 1e-9 and abs(y2 - 128) < 1e-9


def test_crop_zoom_full_image():
    spec = bx.crop_zoom(bx.BoxNorm(0.0, 0.0, 1.0, 1.0), (640, 480))
    assert spec.rect_px == (0.0, 0.0, 640.0, 480.0)
    assert spec.output_size == (448, 336)
    assert abs(spec.scale_factor - 448 / 640) < 1e-12


def test_crop_zoom_rect_always_inside():
    rng = np.random.default_rng(3)
    for _ in range(300):
        # raw boxes may stick out of the unit square
        x1, y1 = rng.uniform(-0.3, 0.8, size=2)
        b = bx.BoxNorm(x1, y1, x1 + rng.uniform(0.02, 0.6), y1 + rng.uniform(0.02, 0.6))
        w, h = int(rng.integers(50, 2000)), int(rng.integers(50, 2000))
        try:
            spec = bx.crop_zoom(b, (w, h))
        except ValueError:
            continue  # fully outside after clamping
        rx1, ry1, rx2, ry2 = spec.rect_px
        assert -1e-9 <= rx1 < rx2 <= w + 1e-9
        assert -1e-9 <= ry1 < ry2 <= h + 1e-9
        assert max(spec.output_size) == 448


def test_crop_zoom_rejects_outside_box():
    with pytest.raises(ValueError, match="degenerate"):
        bx.crop_zoom(bx.BoxNorm(1.2, 1.2, 1.5, 1.5), (100, 100))


def test_crop_zoom_image_smaller_than_min_side():
    spec = bx.crop_zoom(bx.BoxNorm(0.2, 0.2, 0.4, 0.4), (20, 20), min_side=28)
    assert spec.rect_px == (0.0, 0.0, 20.0, 20.0)


# -- differentiable route ----------------------------------------------------


def test_tensor_giou_matches_float_route():
    rng = np.random.default_rng(4)
    preds, gts, want = [], [], []
    for _ in range(64):
        a, b = rand_box(rng), rand_box(rng)
        preds.append(a.as_tuple())
        gts.append(b.as_tuple())
        want.append(bx.giou(a, b))
    pred_t = ad.Tensor(np.asarray(preds, dtype=np.float64))
    got = bx.giou_t(pred_t, np.asarray(gts, dtype=np.float64)).data
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_tensor_detection_loss_matches_float_route():
    rng = np.random.default_rng(5)
    preds, gts, want = [], [], []
    for _ in range(32):
        a, b = rand_box(rng), rand_box(rng)
        preds.append(a.as_tuple())
        gts.append(b.as_tuple())
        want.append(bx.detection_loss(a, b))
    pred_t = ad.Tensor(np.asarray(preds, dtype=np.float64))
    loss = bx.detection_loss_t(pred_t, np.asarray(gts, dtype=np.float64))
    np.testing.assert_allclose(loss.data, np.mean(want), atol=1e-9)
    l1, gterm = bx.detection_loss_terms_t(pred_t, np.asarray(gts, dtype=np.float64))
    np.testing.assert_allclose(l1.data + gterm.data, loss.data, atol=1e-9)


def test_detection_loss_gradcheck():
    rng = np.random.default_rng(6)
    pred = np.asarray([rand_box(rng).as_tuple() for _ in range(6)], dtype=np.float64)
    gt = np.asarray([rand_box(rng).as_tuple() for _ in range(6)], dtype=np.float64)
    params = {"pred": ad.Tensor(pred, requires_grad=True)}
    report = ad.grad_check(lambda: bx.detection_loss_t(params["pred"], gt),
                           params, sample_count=24, seed=0)
    assert report.passed, report.summary()
    assert report.checked >= 20
