"""Procedural toy corpus for desk-scale runs.

Each image is a small "face" disc on a class-coloured background with
seven coloured blobs at known keypoint positions. Left/right partners share
a colour so mirroring leaves the image statistics consistent with the
swapped point identities. Classes differ in background and face colour and
are linearly separable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import write_image, write_landmark_file
from .schema import NUM_POINTS, LandmarkSet

CLASS_NAMES = ("cat", "dog")
_BACKGROUND = {0: (200.0, 95.0, 60.0), 1: (55.0, 105.0, 195.0)}
_FACE = {0: (235.0, 205.0, 140.0), 1: (150.0, 215.0, 225.0)}
# keypoint offsets in units of the face radius, POINT_NAMES order
_OFFSETS = np.array(
    [(-0.95, -0.75), (-0.55, -1.15), (0.95, -0.75), (0.55, -1.15), (-0.4, -0.15), (0.4, -0.15), (0.0, 0.35)]
)
BLOB_COLORS = np.array(
    [(255, 255, 0), (255, 0, 255), (255, 255, 0), (255, 0, 255), (0, 0, 0), (0, 0, 0), (0, 200, 0)],
    dtype=np.float64,
)
# indices sharing a colour, listed as (left, right) or a single point
_GROUPS = ((0, 2), (1, 3), (4, 5), (6,))


def render_face(size: int, class_index: int, rng: np.random.Generator) -> tuple[np.ndarray, LandmarkSet]:
    radius = rng.uniform(5.0, 7.5) * size / 32
    reach = 1.3 * radius + 1.5
    cx = rng.uniform(reach, size - reach)
    cy = rng.uniform(reach, size - reach)
    angle = np.deg2rad(rng.uniform(-12.0, 12.0))
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    offsets = _OFFSETS + rng.normal(0.0, 0.04, _OFFSETS.shape)
    points = (offsets * radius) @ rot.T + np.array([cx, cy])

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    bg = np.array(_BACKGROUND[class_index]) + rng.uniform(-20, 20, 3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    face = np.clip(radius + 0.5 - np.hypot(xx - cx, yy - cy), 0.0, 1.0)[..., None]
    img = img * (1 - face) + (np.array(_FACE[class_index]) + rng.uniform(-15, 15, 3)) * face
    sigma = 0.9 * size / 32
    for (px, py), color in zip(points, BLOB_COLORS):
        a = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2))[..., None]
        img = img * (1 - a) + color * a
    img = img + rng.normal(0.0, 4.0, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), LandmarkSet.from_array(points)


def generate_toy_corpus(
    root: str | Path, per_class: int = 128, size: int = 32, test_fraction: float = 0.25, seed: int = 0
) -> Path:
    """Write ``root/{train,test}/<class>/*.png`` plus ``root/landmarks.txt``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    n_test = int(round(per_class * test_fraction))
    entries = []
    for ci, name in enumerate(CLASS_NAMES):
        for i in range(per_class):
            split = "test" if i < n_test else "train"
            img, lm = render_face(size, ci, rng)
            rel = f"{split}/{name}/{name}_{i:04d}.png"
            write_image(img, root / rel)
            entries.append((rel, lm))
    write_landmark_file(entries, root / "landmarks.txt")
    return root


def blob_centroid_baseline(image: np.ndarray, tolerance: float = 110.0) -> LandmarkSet:
    """Locate keypoints by colour matching; the brute-force reference.

    Pixels are weighted by closeness to each blob colour and the weighted
    centroid taken. Paired blobs are split at the mean x of their colour.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    points = np.zeros((NUM_POINTS, 2))
    for group in _GROUPS:
        color = BLOB_COLORS[group[0]]
        dist = np.linalg.norm(img - color, axis=-1)
        weight = np.clip(1.0 - dist / tolerance, 0.0, None) ** 2
        if weight.sum() == 0:
            points[list(group)] = (w / 2, h / 2)
            continue
        mx = (weight * xx).sum() / weight.sum()
        if len(group) == 1:
            points[group[0]] = (mx, (weight * yy).sum() / weight.sum())
            continue
        for idx, side in zip(group, (xx < mx, xx >= mx)):
            ws = weight * side
            total = ws.sum() or 1.0
            points[idx] = ((ws * xx).sum() / total, (ws * yy).sum() / total)
    return LandmarkSet.from_array(points)
