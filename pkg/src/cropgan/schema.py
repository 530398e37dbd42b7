"""Value types shared across the pipeline: landmark sets and crop boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

POINT_NAMES = (
    "left_ear_1",
    "left_ear_2",
    "right_ear_1",
    "right_ear_2",
    "left_eye",
    "right_eye",
    "nose",
)
NUM_POINTS = len(POINT_NAMES)

# index permutation applied to point identities when an image is mirrored
MIRROR_PERMUTATION = (2, 3, 0, 1, 5, 4, 6)


@dataclass(frozen=True)
class LandmarkSet:
    """Seven named facial keypoints in pixel coordinates.

    Coordinates are continuous: pixel column ``i`` covers ``[i, i + 1)``.
    Points may fall slightly outside the image when a model extrapolates.
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if len(pts) != NUM_POINTS:
            raise ValueError(f"expected {NUM_POINTS} points, got {len(pts)}")
        if not all(math.isfinite(v) for p in pts for v in p):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_array(cls, values: Iterable[float] | np.ndarray) -> "LandmarkSet":
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.size != 2 * NUM_POINTS:
            raise ValueError(f"expected {2 * NUM_POINTS} coordinates, got {arr.size}")
        return cls(tuple(map(tuple, arr.reshape(NUM_POINTS, 2))))

    def to_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)

    def flat(self) -> list[float]:
        return [v for p in self.points for v in p]

    def __getitem__(self, name: str) -> tuple[float, float]:
        return self.points[POINT_NAMES.index(name)]

    def inside(self, width: float, height: float) -> list[bool]:
        return [0 <= x < width and 0 <= y < height for x, y in self.points]


@dataclass(frozen=True)
class CropBox:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty crop box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def within(self, width: int, height: int) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def from_sequence(cls, values: Sequence[int]) -> "CropBox":
        x0, y0, x1, y1 = (int(v) for v in values)
        return cls(x0, y0, x1, y1)
