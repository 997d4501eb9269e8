import numpy as np
import pytest
from hypothesis import given, strategies as st
from shapely.geometry import box as shapely_box

from oddone.core import BBox
from oddone.exceptions import OddOneError
from oddone.geometry import giou, giou_matrix, greedy_nms, iou, iou_matrix, priority_order

from conftest import random_boxes

coord = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def boxes(draw):
    x1, x2 = sorted(draw(st.lists(coord, min_size=2, max_size=2, unique=True)))
    y1, y2 = sorted(draw(st.lists(coord, min_size=2, max_size=2, unique=True)))
    return BBox(x1, y1, x2, y2)


def test_known_values():
    a, b = BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)
    assert iou(a, b) == pytest.approx(1 / 7)
    assert giou(a, b) == pytest.approx(1 / 7 - 2 / 9)
    assert iou(a, a) == 1.0 and giou(a, a) == 1.0
    far = BBox(10, 10, 11, 11)
    assert iou(a, far) == 0.0 and giou(a, far) < 0


@given(boxes(), boxes())
def test_iou_matches_polygon_geometry(a, b):
    pa, pb = shapely_box(*a.as_list()), shapely_box(*b.as_list())
    expected = pa.intersection(pb).area / pa.union(pb).area
    assert iou(a, b) == pytest.approx(expected, abs=1e-9)


@given(boxes(), boxes())
def test_giou_bounds_and_symmetry(a, b):
    g = giou(a, b)
    assert -1.0 <= g <= iou(a, b) + 1e-12
    assert g == pytest.approx(giou(b, a))


def test_matrices_agree_with_scalars(rng):
    a, b = random_boxes(rng, 5), random_boxes(rng, 4)
    im, gm = iou_matrix(a, b), giou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert im[i, j] == pytest.approx(iou(BBox.from_array(a[i]), BBox.from_array(b[j])))
            assert gm[i, j] == pytest.approx(giou(BBox.from_array(a[i]), BBox.from_array(b[j])))


def test_priority_order_ties_keep_input_order():
    assert priority_order([0.5, 0.9, 0.5, 0.9]).tolist() == [1, 3, 0, 2]


def _nms_reference(boxes, scores, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(BBox.from_array(boxes[i]), BBox.from_array(boxes[k])) < thr for k in kept):
            kept.append(i)
    return kept


def test_nms_matches_reference(rng):
    for _ in range(200):
        n = int(rng.integers(0, 12))
        b = random_boxes(rng, n)
        s = np.round(rng.random(n), 1)  # force ties
        thr = float(rng.uniform(0.1, 0.9))
        assert greedy_nms(b, s, thr) == _nms_reference(b, s, thr)


def test_nms_validation():
    with pytest.raises(OddOneError):
        greedy_nms(np.zeros((0, 4)), [], 0.0)
    with pytest.raises(OddOneError):
        greedy_nms([BBox(0, 0, 1, 1)], [0.1, 0.2], 0.5)
