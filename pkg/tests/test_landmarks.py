from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropgan.dataset import DatasetManifest, ManifestError, Record, ingest_directory, write_image
from cropgan.landmarks import (
    LandmarkModel,
    LandmarkModelConfig,
    LandmarksOutOfFrame,
    augment_training_pair,
    denormalize_landmarks,
    filter_outliers,
    frame_anchor,
    normalize_landmarks,
    point_distances,
    rmse,
    train_landmark_model,
)
from cropgan.schema import MIRROR_PERMUTATION, LandmarkSet

from helpers import make_landmarks

coords = st.floats(-500, 500, allow_nan=False)


def _brute_force_rmse(pred, truth) -> float:
    total, count = 0.0, 0
    for p, t in zip(pred, truth):
        for (px, py), (tx, ty) in zip(p.points, t.points):
            total += math.sqrt((px - tx) ** 2 + (py - ty) ** 2)
            count += 1
    return total / count


def _quantile(values, q):
    """Linear-interpolation quantile, written out by hand."""
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


# -- normalization -------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(pts=st.lists(st.tuples(coords, coords), min_size=7, max_size=7), w=st.floats(1, 1000), h=st.floats(1, 1000))
def test_normalize_round_trip(pts, w, h):
    lm = LandmarkSet(tuple(pts))
    center, size = frame_anchor(w, h)
    back = denormalize_landmarks(normalize_landmarks(lm, center, size), center, size)
    np.testing.assert_allclose(back.to_array(), lm.to_array(), rtol=1e-9, atol=1e-9)


def test_frame_anchor_maps_center_and_corners():
    center, size = frame_anchor(224, 112)
    lm = LandmarkSet.from_array([[112, 56], [0, 0], [224, 112], [0, 112], [224, 0], [56, 28], [112, 0]])
    n = normalize_landmarks(lm, center, size).to_array()
    np.testing.assert_allclose(n[:5], [[0, 0], [-0.5, -0.5], [0.5, 0.5], [-0.5, 0.5], [0.5, -0.5]])


def test_normalize_rejects_degenerate_anchor():
    lm = LandmarkSet.from_array(np.zeros(14))
    with pytest.raises(ValueError):
        normalize_landmarks(lm, (0, 0), (0, 10))
    with pytest.raises(ValueError):
        denormalize_landmarks(lm, (0, 0), (10, -1))


# -- paired augmentation ---------------------------------------------------------


def _dot_image(lm: LandmarkSet, w: int, h: int, which: int) -> np.ndarray:
    img = np.zeros((h, w, 3), dtype=np.uint8)
    x, y = lm.points[which]
    img[int(y), int(x)] = 255
    return img


def test_mirror_flips_pixels_and_swaps_identities():
    rng = np.random.default_rng(0)
    lm = make_landmarks(rng, 20, 10)
    img = rng.integers(0, 256, (10, 20, 3)).astype(np.uint8)
    out_img, out_lm = augment_training_pair(img, lm, ["mirror"])
    np.testing.assert_array_equal(out_img, img[:, ::-1])
    expected = lm.to_array()[list(MIRROR_PERMUTATION)]
    expected[:, 0] = 20 - expected[:, 0]
    np.testing.assert_allclose(out_lm.to_array(), expected)
    back_img, back_lm = augment_training_pair(out_img, out_lm, ["mirror"])
    np.testing.assert_array_equal(back_img, img)
    np.testing.assert_allclose(back_lm.to_array(), lm.to_array())


@pytest.mark.parametrize("ops", [[("rotate", 90.0)], [("zoom", 1.5)], [("rotate", -30.0), ("zoom", 0.8)], ["mirror", ("rotate", 15.0)]])
def test_geometric_ops_move_pixels_with_landmarks(ops):
    w = h = 40
    lm = LandmarkSet.from_array(np.tile([24.5, 16.5], 7))
    img = _dot_image(lm, w, h, 6)
    out_img, out_lm = augment_training_pair(img, lm, ops)
    ys, xs = np.nonzero(out_img[..., 0])
    weights = out_img[ys, xs, 0].astype(float)
    centroid = np.array([(xs + 0.5) @ weights, (ys + 0.5) @ weights]) / weights.sum()
    assert np.linalg.norm(centroid - np.array(out_lm.points[6])) < 1.0


def test_sampled_ranges_are_seeded():
    lm = LandmarkSet.from_array(np.tile([10.0, 10.0], 7))
    img = np.zeros((20, 20, 3), dtype=np.uint8)
    ops = [("rotate", (-20, 20)), ("zoom", (0.9, 1.1))]
    a = augment_training_pair(img, lm, ops, seed=3)[1]
    b = augment_training_pair(img, lm, ops, seed=3)[1]
    assert a == b


def test_augmentation_out_of_frame_and_bad_ops():
    lm = LandmarkSet.from_array(np.tile([19.0, 19.0], 7))
    img = np.zeros((20, 20, 3), dtype=np.uint8)
    with pytest.raises(LandmarksOutOfFrame):
        augment_training_pair(img, lm, [("zoom", 3.0)])
    with pytest.raises(ValueError):
        augment_training_pair(img, lm, ["shear"])
    with pytest.raises(ValueError):
        augment_training_pair(img, lm, [("zoom", 0.0)])


# -- RMSE and outliers ------------------------------------------------------------


def test_rmse_single_offset_is_exact():
    t = LandmarkSet.from_array(np.zeros(14))
    p = LandmarkSet.from_array(np.tile([3.0, 4.0], 7))
    assert rmse([p], [t]) == 5.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8))
def test_rmse_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    pred = [make_landmarks(rng, 300, 200) for _ in range(n)]
    truth = [make_landmarks(rng, 300, 200) for _ in range(n)]
    assert abs(rmse(pred, truth) - _brute_force_rmse(pred, truth)) <= 1e-12
    assert point_distances(pred, truth).shape == (n, 7)


def test_rmse_rejects_empty():
    with pytest.raises(ValueError):
        rmse([], [])


def _offset_records(offsets):
    truth = LandmarkSet.from_array(np.zeros(14))
    recs = [Record(f"/img/{i}.png", 1, landmarks=truth) for i in range(len(offsets))]
    preds = [LandmarkSet.from_array(np.tile([d, 0.0], 7)) for d in offsets]
    return list(zip(recs, preds))


def test_distance_filter_matches_median_iqr_arithmetic():
    offsets = [1.0, 1.2, 0.8, 1.1, 0.9, 1.0, 1.05, 9.0, 0.95, 30.0]
    med, q1, q3 = _quantile(offsets, 0.5), _quantile(offsets, 0.25), _quantile(offsets, 0.75)
    limit = med + 3.0 * (q3 - q1)
    kept, removed = filter_outliers(_offset_records(offsets), k=3.0)
    assert sorted(p.points[0][0] for _, p in removed) == sorted(d for d in offsets if d > limit)
    assert len(kept) + len(removed) == len(offsets)


def test_distance_filter_boundary_and_infinite_k():
    # a value exactly at the limit stays: removal needs strictly greater
    offsets = [1.0, 1.0, 1.0, 1.0, 2.0]
    kept, removed = filter_outliers(_offset_records(offsets), k=0.0)
    assert [p.points[0][0] for _, p in removed] == [2.0]
    kept, removed = filter_outliers(_offset_records([1.0, 2.0, 3.0, 100.0]), k=math.inf)
    assert removed == [] and len(kept) == 4


def test_distance_filter_needs_ground_truth_and_input():
    with pytest.raises(ValueError):
        filter_outliers([])
    with pytest.raises(ManifestError):
        filter_outliers([(Record("/x.png", 1), LandmarkSet.from_array(np.zeros(14)))])
    with pytest.raises(ValueError):
        filter_outliers(_offset_records([1.0]), method="other")


def test_geometric_filter(tmp_path):
    path = write_image(np.zeros((100, 100, 3)), tmp_path / "a.png")
    rec = Record(path, 1)
    good = LandmarkSet.from_array(np.random.default_rng(0).uniform(20, 80, 14))
    tiny = LandmarkSet.from_array(np.tile([50.0, 50.0], 7))
    outside = LandmarkSet.from_array(np.full(14, -5.0))
    kept, removed = filter_outliers([(rec, good), (rec, tiny), (rec, outside)], method="geometric")
    assert [p for _, p in kept] == [good]
    assert len(removed) == 2


# -- model ----------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        LandmarkModelConfig(output_dim=10)
    with pytest.raises(ValueError):
        LandmarkModelConfig(backbone="resnet")
    assert LandmarkModelConfig(input_size=[32, 32]).input_size == (32, 32)


def test_training_requires_landmarks(tmp_path):
    path = write_image(np.zeros((8, 8, 3)), tmp_path / "a.png")
    m = DatasetManifest([Record(path, 1)], 1, ["a"])
    with pytest.raises(ManifestError, match="lack landmarks"):
        train_landmark_model(LandmarkModelConfig(input_size=(8, 8)), m, m)


def test_zero_epochs_returns_initialized_model(toy_root):
    m = ingest_directory(toy_root)
    train = m.subset(m.split("train")[:4])
    model, report = train_landmark_model(LandmarkModelConfig(input_size=(32, 32), epochs=0), train, train)
    assert report.curve == [] and report.final_val_rmse is None
    assert model.predict(train.records[0].image_ref).to_array().shape == (7, 2)


def test_training_learns_and_round_trips(toy_root, tmp_path):
    m = ingest_directory(toy_root)
    train, val = m.subset(m.split("train")), m.subset(m.split("test")[:16])
    cfg = LandmarkModelConfig(input_size=(32, 32), epochs=4, seed=1)
    model, report = train_landmark_model(cfg, train, val)
    assert len(report.curve) == 4
    assert report.curve[-1]["val_rmse"] < report.curve[0]["val_rmse"]
    assert report.to_dict()["loss"] == "mse-normalized"

    loaded = LandmarkModel.load(model.save(tmp_path / "lm.pt"))
    img = val.records[0].image_ref
    np.testing.assert_array_equal(loaded.predict(img).to_array(), model.predict(img).to_array())

    again, _ = train_landmark_model(cfg, train, val)
    np.testing.assert_array_equal(again.predict(img).to_array(), model.predict(img).to_array())


def test_predictions_are_rescaled_to_the_source_frame(toy_root):
    m = ingest_directory(toy_root)
    model, _ = train_landmark_model(LandmarkModelConfig(input_size=(32, 32), epochs=0), m.subset(m.records[:2]), m.subset([]))
    img = np.asarray(np.random.default_rng(0).integers(0, 256, (32, 32, 3)), dtype=np.uint8)
    big = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
    small_pred, big_pred = model.predict(img).to_array(), model.predict(big).to_array()
    np.testing.assert_allclose(big_pred, 2 * small_pred, rtol=0.05, atol=1.0)


def test_load_rejects_foreign_checkpoint(tmp_path):
    import torch

    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        LandmarkModel.load(tmp_path / "x.pt")
