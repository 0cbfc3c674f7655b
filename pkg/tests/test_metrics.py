import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import box_iou_scalar
from smckit.errors import DimensionMismatch, InvalidInput
from smckit.metrics import accuracy, average_precision, box_iou, center_to_corners, mask_iou, mean_iou, metrics


def test_box_iou_hand_geometry():
    # two unit-offset 2x2 squares: intersection 1, union 7
    assert box_iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=0)
    assert box_iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert box_iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert box_iou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0  # touching edges
    assert box_iou([0, 0, 4, 4], [1, 1, 3, 3]) == 0.25  # containment
    assert box_iou([0, 0, 0, 0], [0, 0, 0, 0]) == 0.0


def test_center_to_corners():
    np.testing.assert_array_equal(center_to_corners([[2, 3, 2, 4]]), [[1, 1, 3, 5]])


box = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5), st.floats(0.1, 5)).map(
    lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]]
)


@given(box, box)
def test_box_iou_matches_scalar_oracle(a, b):
    got = float(box_iou(a, b))
    assert got == pytest.approx(box_iou_scalar(a, b), abs=1e-12)
    assert got == pytest.approx(float(box_iou(b, a)), abs=1e-12)
    assert 0.0 <= got <= 1.0


def test_mask_iou_and_miou():
    p = np.zeros((1, 4, 4), bool)
    t = np.zeros((1, 4, 4), bool)
    p[0, :2, :2] = True
    t[0, :2, :3] = True
    assert mask_iou(p, t) == pytest.approx(4 / 6)
    # background: pred 12 px, target 10 px, both 10
    assert mean_iou(p.astype(int), t.astype(int)) == pytest.approx((4 / 6 + 10 / 12) / 2)
    assert mask_iou(np.zeros((1, 2, 2), bool), np.zeros((1, 2, 2), bool)) == 1.0


def test_miou_skips_absent_classes():
    t = np.zeros((2, 3, 3), int)
    assert mean_iou(t, t) == 1.0


def test_average_precision_thresholds():
    pred = np.array([[0, 0, 2, 2], [0, 0, 2, 2], [0, 0, 2, 2]], float)
    true = np.array([[0, 0, 2, 2], [1, 1, 3, 3], [0, 0, 2, 1.2]], float)
    # IoUs 1, 1/7, 0.6
    assert average_precision(pred, true, 0.5) == pytest.approx(2 / 3)
    assert average_precision(pred, true, 0.75) == pytest.approx(1 / 3)


def test_accuracy_and_dispatch():
    assert accuracy([1, 2, 3, 4], [1, 2, 0, 4]) == 0.75
    assert metrics([1, 2], [1, 1], "classification") == {"accuracy": 0.5}
    det = metrics(np.array([[0, 0, 2, 2.0]]), np.array([[1, 1, 3, 3.0]]), "detection")
    assert det["iou"] == pytest.approx(1 / 7) and det["ap50"] == 0.0
    with pytest.raises(InvalidInput):
        metrics([], [], "classification")
    with pytest.raises(InvalidInput):
        metrics([1], [1], "ranking")
    with pytest.raises(DimensionMismatch):
        accuracy([1, 2], [1])
