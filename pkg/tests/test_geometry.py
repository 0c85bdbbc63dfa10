import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from siamrel.geometry import (BBox, DegenerateBoxError, DegenerateBoxWarning, GridSpec, Label, assign_labels,
                              box_iou, decode_box, decode_boxes, encode_regression, iou, iou_loss)

UNIT = GridSpec(size=25, stride=1.0, origin=0.0)


def raster_iou(a: BBox, b: BBox, res: int = 480, extent: float = 6.0) -> float:
    """Pixel-counting IoU at ``res`` samples per axis over ``[0, extent]``."""
    c = (np.arange(res) + 0.5) * extent / res
    xs, ys = np.meshgrid(c, c)

    def inside(bx):
        return (xs >= bx.x0) & (xs < bx.x1) & (ys >= bx.y0) & (ys < bx.y1)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return float((ia & ib).sum() / union) if union else 0.0


def brute_labels(gt: BBox, grid: GridSpec) -> np.ndarray:
    out = np.empty((grid.size, grid.size), dtype=np.int8)
    for i in range(grid.size):
        for j in range(grid.size):
            px, py = grid.index_to_point(i, j)
            e1 = (px - gt.cx) ** 2 / (gt.w / 2) ** 2 + (py - gt.cy) ** 2 / (gt.h / 2) ** 2
            e2 = (px - gt.cx) ** 2 / (gt.w / 4) ** 2 + (py - gt.cy) ** 2 / (gt.h / 4) ** 2
            out[i, j] = Label.POSITIVE if e2 <= 1 else (Label.NEGATIVE if e1 > 1 else Label.IGNORE)
    return out


@pytest.mark.parametrize("a, b, expected", [
    ((0, 0, 2, 2), (0, 0, 2, 2), 1.0),
    ((0, 0, 2, 2), (3, 3, 5, 5), 0.0),
    ((0, 0, 2, 2), (1, 1, 3, 3), 1 / 7),
])
def test_iou_examples(a, b, expected):
    assert iou(BBox(*a), BBox(*b)) == pytest.approx(expected, abs=1e-12)
    assert raster_iou(BBox(*a), BBox(*b)) == pytest.approx(expected, abs=1e-9)


def test_iou_zero_union():
    assert iou(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1)) == 0.0


boxes = st.builds(
    lambda x, y, w, h: BBox(x, y, x + w, y + h),
    st.floats(0, 3), st.floats(0, 3), st.floats(0.25, 3), st.floats(0.25, 3),
)


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))
    assert iou(a, a) == pytest.approx(1.0)
    assert box_iou(a.as_array(), b.as_array()) == pytest.approx(v)


def test_iou_matches_raster_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        # quarter-pixel aligned corners make the raster count exact at 80 samples per pixel
        a0, b0 = rng.integers(0, 12, 2) / 4, rng.integers(0, 12, 2) / 4
        a = BBox(*a0, *(a0 + rng.integers(1, 12, 2) / 4))
        b = BBox(*b0, *(b0 + rng.integers(1, 12, 2) / 4))
        assert iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-9)


@pytest.mark.parametrize("pred, gt, expected", [
    ((0, 0, 2, 2), (0, 0, 2, 2), 0.0),
    ((0, 0, 2, 2), (3, 3, 5, 5), 1.0),
    ((0, 0, 2, 2), (1, 1, 3, 3), 6 / 7),
])
def test_iou_loss_examples(pred, gt, expected):
    v = iou_loss(torch.tensor(pred, dtype=torch.float64), torch.tensor(gt, dtype=torch.float64))
    assert abs(float(v) - expected) < 1e-9


def test_iou_loss_gradcheck():
    pred = torch.tensor([[0.3, 0.2, 2.1, 2.4], [1.0, 0.5, 4.0, 3.3]], dtype=torch.float64, requires_grad=True)
    gt = torch.tensor([[1.1, 0.9, 3.2, 3.0], [0.0, 0.0, 3.0, 3.0]], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda p: iou_loss(p, gt), (pred,), eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.mark.parametrize("loc, expected", [
    ((12, 12), Label.POSITIVE),
    ((12, 15), Label.IGNORE),
    ((20, 12), Label.NEGATIVE),
])
def test_label_examples(loc, expected):
    gt = BBox.from_center(12, 12, 8, 8)
    labels = assign_labels(gt, UNIT)
    x, y = loc
    assert labels[y, x] == expected


def test_labels_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        grid = GridSpec(size=int(rng.integers(5, 26)), stride=float(rng.uniform(1, 10)),
                        origin=float(rng.uniform(-5, 40)))
        span = grid.offset + grid.stride * grid.size
        gt = BBox.from_center(rng.uniform(0, span), rng.uniform(0, span),
                              rng.uniform(1, span), rng.uniform(1, span))
        np.testing.assert_array_equal(assign_labels(gt, grid), brute_labels(gt, grid))


@settings(max_examples=50, deadline=None)
@given(st.floats(2, 200), st.floats(2, 200), st.floats(40, 215), st.floats(40, 215))
def test_label_partition_and_center(w, h, cx, cy):
    grid = GridSpec()
    labels = assign_labels(BBox.from_center(cx, cy, w, h), grid)
    assert labels.size == grid.size ** 2
    assert set(np.unique(labels)) <= {-1, 0, 1}


@pytest.mark.parametrize("w, h", [(8, 8), (10, 6), (14, 22)])
def test_label_reflection_symmetry(w, h):
    labels = assign_labels(BBox.from_center(12, 12, w, h), UNIT)
    np.testing.assert_array_equal(labels, labels[::-1, :])
    np.testing.assert_array_equal(labels, labels[:, ::-1])


def test_degenerate_gt_rejected():
    with pytest.raises(DegenerateBoxError):
        assign_labels(BBox(1, 1, 1, 5), UNIT)


def test_encode_examples():
    gt = BBox(10, 20, 50, 60)
    targets, mask = encode_regression(gt, GridSpec(size=70, stride=1.0, origin=0.0))
    np.testing.assert_allclose(targets[40, 30], [20, 20, 20, 20])
    np.testing.assert_allclose(targets[22, 12], [2, 2, 38, 38])
    assert targets[30, 10, 0] == 0.0
    assert mask[40, 30] and not mask[22, 12]


def test_decode_examples():
    assert decode_box((30, 40), (20, 20, 20, 20)) == BBox(10, 20, 50, 60)
    b = decode_box((5, 7), (0, 0, 0, 0))
    assert (b.w, b.h, b.cx, b.cy) == (0, 0, 5, 7)


def test_decode_inverted_clamps_with_warning():
    with pytest.warns(DegenerateBoxWarning):
        b = decode_box((10, 10), (-3, 1, 1, 1))
    assert b.w == 0 and b.cx == pytest.approx(12.0)


def test_round_trip_1000_boxes():
    rng = np.random.default_rng(1)
    grid = GridSpec()
    px, py = grid.points()
    worst = 0.0
    for _ in range(1000):
        gt = BBox.from_center(*rng.uniform(60, 195, 2), *rng.uniform(8, 120, 2))
        targets, mask = encode_regression(gt, grid)
        boxes, valid = decode_boxes(px, py, targets)
        assert valid[mask].all()
        assert (targets[mask] > 0).all()
        worst = max(worst, np.abs(boxes - gt.as_array()).max())
        for iy, ix in np.argwhere(mask)[:3]:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                one = decode_box(grid.index_to_point(iy, ix), targets[iy, ix])
            worst = max(worst, np.abs(one.as_array() - gt.as_array()).max())
    assert worst < 1e-6


def test_bbox_conversions():
    b = BBox.from_xywh(1.5, 2.5, 3.0, 4.0)
    assert b.xywh() == (1.5, 2.5, 3.0, 4.0)
    c = BBox.from_center(b.cx, b.cy, b.w, b.h)
    assert c == b
    with pytest.raises(ValueError):
        BBox(2, 0, 1, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, float("nan"), 1)


def test_grid_default_geometry():
    grid = GridSpec()
    assert grid.offset == pytest.approx(31.5)
    assert grid.index_to_point(12, 12) == (127.5, 127.5)
    assert grid.point_to_index(*grid.index_to_point(3, 7)) == (3, 7)
