"""Shared builders for the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from cropgan.dataset import DatasetManifest, Record, write_image
from cropgan.schema import LandmarkSet


def make_landmarks(rng: np.random.Generator, width: float, height: float) -> LandmarkSet:
    return LandmarkSet.from_array(rng.uniform([0, 0], [width, height], size=(7, 2)))


def write_manifest(
    root: Path,
    counts: dict[str, int],
    size: int = 16,
    split: str = "train",
    seed: int = 0,
    with_landmarks: bool = False,
) -> DatasetManifest:
    """Random images on disk plus a manifest; ``counts`` maps class name to image count."""
    rng = np.random.default_rng(seed)
    names = sorted(counts)
    records = []
    for cid, name in enumerate(names, 1):
        for i in range(counts[name]):
            path = write_image(rng.integers(0, 256, (size, size, 3)), root / split / name / f"{i:04d}.png")
            lm = make_landmarks(rng, size, size) if with_landmarks else None
            records.append(Record(path, cid, split=split, landmarks=lm))
    return DatasetManifest(records, len(names), names, resolution=(size, size))
