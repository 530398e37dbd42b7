from __future__ import annotations

import math

import numpy as np
import pytest

from cropgan.schema import MIRROR_PERMUTATION, NUM_POINTS, POINT_NAMES, CropBox, LandmarkSet


def test_point_order_and_mirror_partners():
    assert NUM_POINTS == 7
    assert POINT_NAMES[MIRROR_PERMUTATION[0]] == "right_ear_1"
    assert POINT_NAMES[MIRROR_PERMUTATION[4]] == "right_eye"
    assert POINT_NAMES[MIRROR_PERMUTATION[6]] == "nose"
    # the permutation is an involution
    assert all(MIRROR_PERMUTATION[MIRROR_PERMUTATION[i]] == i for i in range(NUM_POINTS))


def test_landmark_set_round_trip_and_lookup():
    arr = np.arange(14, dtype=float).reshape(7, 2)
    lm = LandmarkSet.from_array(arr)
    assert np.array_equal(lm.to_array(), arr)
    assert lm.flat() == list(range(14))
    assert lm["nose"] == (12.0, 13.0)


@pytest.mark.parametrize("bad", [np.zeros(12), np.zeros(16)])
def test_landmark_set_rejects_wrong_length(bad):
    with pytest.raises(ValueError):
        LandmarkSet.from_array(bad)


def test_landmark_set_rejects_non_finite():
    arr = np.zeros(14)
    arr[3] = math.nan
    with pytest.raises(ValueError, match="finite"):
        LandmarkSet.from_array(arr)


def test_inside_uses_half_open_pixels():
    lm = LandmarkSet.from_array([[0, 0], [9.999, 5], [10, 5], [-0.001, 1], [5, 5], [5, 10], [5, 9.5]])
    assert lm.inside(10, 10) == [True, True, False, False, True, False, True]


def test_crop_box_geometry():
    box = CropBox(2, 3, 10, 7)
    assert (box.width, box.height) == (8, 4)
    assert box.within(10, 7)
    assert not box.within(9, 7)
    assert CropBox.from_sequence(box.as_tuple()) == box
    with pytest.raises(ValueError):
        CropBox(5, 5, 5, 9)
