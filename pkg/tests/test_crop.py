from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cropgan.crop import apply_crop, center_crop_box, compute_crop, crop_manifest
from cropgan.dataset import DatasetManifest, Record, read_image, write_image
from cropgan.schema import CropBox, LandmarkSet

dims = st.tuples(st.integers(16, 400), st.integers(16, 400))
margins = st.sampled_from([0.0, 0.25, 0.5, 0.6, 1.0])


@st.composite
def landmark_cases(draw, dyadic=False):
    w, h = draw(dims)
    grid = 64 if dyadic else None
    pts = []
    for _ in range(7):
        x = draw(st.floats(0, w, exclude_max=True))
        y = draw(st.floats(0, h, exclude_max=True))
        if grid:
            x, y = math.floor(x * grid) / grid, math.floor(y * grid) / grid
        pts.append((x, y))
    return LandmarkSet(tuple(pts)), (w, h)


def _padded_extent(lm: LandmarkSet, margin: float, square: bool) -> tuple[int, int]:
    pts = lm.to_array()
    (mx, my), (Mx, My) = pts.min(axis=0), pts.max(axis=0)
    pad = margin * max(Mx - mx, My - my)
    bw = max(math.ceil(Mx + pad) - math.floor(mx - pad), 1)
    bh = max(math.ceil(My + pad) - math.floor(my - pad), 1)
    if square:
        bw = bh = max(bw, bh)
    return bw, bh


@settings(max_examples=300, deadline=None)
@given(case=landmark_cases(), margin=margins, square=st.booleans())
def test_box_inside_frame_and_contains_landmarks(case, margin, square):
    lm, (w, h) = case
    box = compute_crop(lm, (w, h), margin, square)
    assert box.within(w, h)
    for x, y in lm.points:
        assert box.x0 <= x <= box.x1 and box.y0 <= y <= box.y1


@settings(max_examples=300, deadline=None)
@given(case=landmark_cases(), margin=margins)
def test_square_whenever_the_frame_allows(case, margin):
    lm, (w, h) = case
    side, _ = _padded_extent(lm, margin, True)
    box = compute_crop(lm, (w, h), margin, True)
    if side <= min(w, h):
        assert box.width == box.height == side
    else:
        assert box.width == w or box.height == h


@settings(max_examples=300, deadline=None)
@given(case=landmark_cases(), margin=margins, square=st.booleans())
def test_clamping_shifts_without_shrinking(case, margin, square):
    lm, (w, h) = case
    bw, bh = _padded_extent(lm, margin, square)
    assume(bw <= w and bh <= h)
    box = compute_crop(lm, (w, h), margin, square)
    assert (box.width, box.height) == (bw, bh)


@settings(max_examples=300, deadline=None)
@given(case=landmark_cases(dyadic=True), margin=st.sampled_from([0.0, 0.25, 0.5, 1.0]), dx=st.integers(-50, 50), dy=st.integers(-50, 50), square=st.booleans())
def test_translation_equivariance_away_from_edges(case, margin, dx, dy, square):
    lm, (w, h) = case
    big = (w + 1000, h + 1000)
    base = LandmarkSet.from_array(lm.to_array() + 500)
    moved = LandmarkSet.from_array(lm.to_array() + 500 + [dx, dy])
    a, b = compute_crop(base, big, margin, square), compute_crop(moved, big, margin, square)
    assert (b.x0 - a.x0, b.y0 - a.y0, b.x1 - a.x1, b.y1 - a.y1) == (dx, dy, dx, dy)


def test_known_box():
    lm = LandmarkSet.from_array([[40, 40], [60, 40], [40, 50], [60, 50], [45, 45], [55, 45], [50, 48]])
    # bbox 20x10, pad 0.5*20 = 10 -> [30,70) x [30,60), squared -> [30,70) x [25,65)
    assert compute_crop(lm, (100, 100), 0.5, True) == CropBox(30, 25, 70, 65)
    assert compute_crop(lm, (100, 100), 0.5, False) == CropBox(30, 30, 70, 60)


def test_shift_at_corner():
    lm = LandmarkSet.from_array(np.tile([1.0, 1.0], 7) + np.r_[0, 0, 4, 4, np.zeros(10)])
    box = compute_crop(lm, (50, 50), 1.0, True)
    assert box.as_tuple() == (0, 0, 12, 12)


def test_degenerate_landmarks_still_give_a_box():
    lm = LandmarkSet.from_array(np.tile([10.5, 10.5], 7))
    box = compute_crop(lm, (30, 30), 0.6, True)
    assert box.width == box.height >= 1


def test_errors():
    lm = LandmarkSet.from_array(np.full(14, -1.0))
    with pytest.raises(ValueError, match="inside"):
        compute_crop(lm, (10, 10))
    with pytest.raises(ValueError):
        compute_crop(LandmarkSet.from_array(np.full(14, 5.0)), (10, 10), margin=-0.1)


def test_center_crop_and_apply():
    assert center_crop_box((40, 20)) == CropBox(10, 0, 30, 20)
    img = np.arange(20 * 40 * 3, dtype=np.uint8).reshape(20, 40, 3)
    box = CropBox(10, 0, 30, 20)
    np.testing.assert_array_equal(apply_crop(img, box, (20, 20)), img[:, 10:30])
    assert apply_crop(img, box, (8, 8)).shape == (8, 8, 3)
    with pytest.raises(ValueError):
        apply_crop(img, CropBox(30, 0, 50, 20), (20, 20))


class _FixedPredictor:
    def __init__(self, outputs):
        self.outputs = list(outputs)

    def predict(self, image):
        return self.outputs.pop(0)


def test_crop_manifest_with_fallback(tmp_path):
    rng = np.random.default_rng(0)
    recs = [Record(write_image(rng.integers(0, 256, (40, 60, 3)), tmp_path / f"{i}.png"), 1) for i in range(2)]
    m = DatasetManifest(recs, 1, ["a"])
    good = LandmarkSet.from_array(rng.uniform(15, 35, 14))
    bad = LandmarkSet.from_array(np.full(14, -10.0))
    out, report = crop_manifest(m, _FixedPredictor([good, bad]), out_dir=tmp_path / "crops", out_size=(16, 16))
    assert len(out) == 2 and out.resolution == (16, 16)
    assert report.fallbacks == 1
    assert out.records[1].source_crop == CropBox(10, 0, 50, 40)
    assert out.records[0].source_crop == compute_crop(good, (60, 40))
    assert all(r.landmarks is None and r.class_id == 1 for r in out.records)
    assert read_image(out.records[0].image_ref).shape == (16, 16, 3)
    lines = report.save(tmp_path / "report.jsonl").read_text().splitlines()
    assert len(lines) == 2
