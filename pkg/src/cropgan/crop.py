"""Square crop boxes around predicted landmarks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, ManifestError, read_image, write_image, _relpath
from .schema import CropBox, LandmarkSet

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.6


def _fit_axis(a0: int, a1: int, limit: int) -> tuple[int, int]:
    """Move ``[a0, a1)`` inside ``[0, limit)``; shrink only if it cannot fit."""
    if a1 - a0 >= limit:
        return 0, limit
    if a0 < 0:
        a1, a0 = a1 - a0, 0
    if a1 > limit:
        a0, a1 = a0 - (a1 - limit), limit
    return a0, a1


def _grow(a0: int, a1: int, target: int) -> tuple[int, int]:
    d = target - (a1 - a0)
    return a0 - d // 2, a1 + d - d // 2


def compute_crop(l: LandmarkSet, image_dims: tuple[int, int], margin: float = DEFAULT_MARGIN, square: bool = True) -> CropBox:
    """Crop box around the landmark bounding box.

    Each side of the bounding box is pushed out by ``margin * max(bw, bh)``.
    With ``square`` the shorter side is grown symmetrically to match the
    longer one. The box is then shifted into the frame and only shrunk when
    it is larger than the frame.
    """
    if margin < 0 or math.isnan(margin):
        raise ValueError(f"margin must be >= 0, got {margin}")
    width, height = int(image_dims[0]), int(image_dims[1])
    if not any(l.inside(width, height)):
        raise ValueError("no landmark lies inside the image frame")

    pts = l.to_array()
    (mx, my), (Mx, My) = pts.min(axis=0), pts.max(axis=0)
    pad = margin * max(Mx - mx, My - my)
    x0, y0 = math.floor(mx - pad), math.floor(my - pad)
    x1, y1 = math.ceil(Mx + pad), math.ceil(My + pad)
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)

    if square:
        side = max(x1 - x0, y1 - y0)
        x0, x1 = _grow(x0, x1, side)
        y0, y1 = _grow(y0, y1, side)

    x0, x1 = _fit_axis(x0, x1, width)
    y0, y1 = _fit_axis(y0, y1, height)

    if square and (x1 - x0) != (y1 - y0):
        # one axis hit the frame; retreat the other to the same side if the
        # landmarks still fit, otherwise keep them and give up squareness
        side = min(x1 - x0, y1 - y0)
        cx0, cy0 = max(math.floor(mx), 0), max(math.floor(my), 0)
        cx1, cy1 = min(math.ceil(Mx), width), min(math.ceil(My), height)
        if x1 - x0 > side and cx1 - cx0 <= side:
            x0, x1 = _shrink_around(x0, x1, side, cx0, cx1)
        elif y1 - y0 > side and cy1 - cy0 <= side:
            y0, y1 = _shrink_around(y0, y1, side, cy0, cy1)
    return CropBox(int(x0), int(y0), int(x1), int(y1))


def _shrink_around(a0: int, a1: int, side: int, c0: int, c1: int) -> tuple[int, int]:
    mid = (a0 + a1) // 2
    s0 = mid - side // 2
    s0 = min(max(s0, c1 - side), c0)
    s0 = min(max(s0, a0), a1 - side)
    return s0, s0 + side


def center_crop_box(image_dims: tuple[int, int]) -> CropBox:
    w, h = int(image_dims[0]), int(image_dims[1])
    side = min(w, h)
    x0, y0 = (w - side) // 2, (h - side) // 2
    return CropBox(x0, y0, x0 + side, y0 + side)


def apply_crop(image: np.ndarray, box: CropBox, out_size: tuple[int, int]) -> np.ndarray:
    image = np.asarray(image)
    h, w = image.shape[:2]
    if not box.within(w, h):
        raise ValueError(f"crop box {box.as_tuple()} outside {w}x{h} image")
    region = image[box.y0 : box.y1, box.x0 : box.x1]
    if (box.width, box.height) == tuple(out_size):
        return region.copy()
    return np.asarray(Image.fromarray(region).resize(tuple(out_size), Image.BILINEAR))


class Predictor(Protocol):
    def predict(self, image) -> LandmarkSet: ...


@dataclass
class CropReport:
    entries: list[dict] = field(default_factory=list)

    @property
    def fallbacks(self) -> int:
        return sum(1 for e in self.entries if e["fallback"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries))
        return path


def _plausible(lm: LandmarkSet, w: int, h: int, area_range) -> str | None:
    if not any(lm.inside(w, h)):
        return "all landmarks outside frame"
    pts = lm.to_array()
    span = pts.max(axis=0) - pts.min(axis=0)
    ratio = float(span[0] * span[1]) / float(w * h)
    lo, hi = area_range
    if not lo <= ratio <= hi:
        return f"landmark box covers {ratio:.4f} of the image"
    return None


def crop_manifest(
    m: DatasetManifest,
    model: Predictor,
    margin: float = DEFAULT_MARGIN,
    square: bool = True,
    out_dir: str | Path = "crops",
    out_size: tuple[int, int] | None = None,
    area_range: tuple[float, float] = (0.005, 1.0),
) -> tuple[DatasetManifest, CropReport]:
    """Crop every record around its predicted landmarks.

    Predictions that fail the geometric plausibility check fall back to a
    centered square crop; nothing is dropped. Class ids and splits carry
    over unchanged.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create {out_dir}: {exc}") from exc
    size = tuple(out_size) if out_size else (m.resolution or (128, 128))
    report = CropReport()
    records = []
    for i, rec in enumerate(m.records):
        entry = {"image": _relpath(rec.image_ref, out_dir), "fallback": False, "reason": None}
        try:
            image = read_image(rec.image_ref)
        except Exception as exc:
            entry.update(error=f"{type(exc).__name__}: {exc}", box=None)
            report.entries.append(entry)
            logger.warning("crop skipped %s: %s", rec.image_ref, exc)
            continue
        h, w = image.shape[:2]
        lm = model.predict(image)
        reason = _plausible(lm, w, h, area_range)
        if reason is None:
            box = compute_crop(lm, (w, h), margin, square)
        else:
            box = center_crop_box((w, h))
            entry.update(fallback=True, reason=reason)
        dst = write_image(apply_crop(image, box, size), out_dir / f"{i:06d}.png")
        entry["box"] = list(box.as_tuple())
        report.entries.append(entry)
        records.append(replace(rec, image_ref=dst, landmarks=None, source_crop=box))
    out = m.subset(records, crop={"margin": margin, "square": square, "fallbacks": report.fallbacks})
    out.resolution = (int(size[0]), int(size[1]))
    return out, report
