"""Manifest-based dataset handling.

A manifest is a JSON-lines file. The first line is a header carrying the
class map, resolution and free-form metadata; every following line is one
record. Image paths are stored relative to the manifest file so a whole
output tree can be copied or moved.

Supported directory layouts for :func:`ingest_directory`:

``class-per-folder``
    ``root/<class>/<image>``, all records in the train split, or
    ``root/<split>/<class>/<image>`` when the top-level folders are split
    names (``train``, ``val``, ``test``).
``annotation-file``
    ``root/annotations.txt`` with lines ``<relative path> <class name> <split>``.
``oxford-pets``
    ``root/images/*.jpg`` with the official ``annotations/trainval.txt`` and
    ``annotations/test.txt`` split lists.

In every layout an optional ``root/landmarks.txt`` attaches keypoints, one
line per image: ``<relative path> x1 y1 ... x7 y7`` in
:data:`cropgan.schema.POINT_NAMES` order.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .schema import CropBox, LandmarkSet

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PROVENANCES = ("real", "synthetic")
LAYOUTS = ("class-per-folder", "annotation-file", "oxford-pets")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
MANIFEST_FORMAT = "cropgan-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Raised when a manifest or its inputs violate an invariant."""


class ContaminationError(ManifestError):
    """A synthetic record reached an evaluation split or an evaluation set."""


@dataclass(frozen=True)
class Record:
    image_ref: Path
    class_id: int
    split: str = "train"
    provenance: str = "real"
    landmarks: LandmarkSet | None = None
    source_crop: CropBox | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_ref", Path(self.image_ref))
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise ManifestError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "synthetic" and self.split != "train":
            raise ContaminationError(
                f"synthetic record {self.image_ref} cannot be in the {self.split} split"
            )

    def to_json(self, base: Path) -> dict:
        out = {
            "image_ref": _relpath(self.image_ref, base),
            "class_id": self.class_id,
            "split": self.split,
            "provenance": self.provenance,
        }
        if self.landmarks is not None:
            out["landmarks"] = self.landmarks.flat()
        if self.source_crop is not None:
            out["source_crop"] = list(self.source_crop.as_tuple())
        return out

    @classmethod
    def from_json(cls, obj: dict, base: Path) -> "Record":
        lm = obj.get("landmarks")
        box = obj.get("source_crop")
        return cls(
            image_ref=Path(os.path.normpath(base / obj["image_ref"])),
            class_id=int(obj["class_id"]),
            split=obj.get("split", "train"),
            provenance=obj.get("provenance", "real"),
            landmarks=LandmarkSet.from_array(lm) if lm is not None else None,
            source_crop=CropBox.from_sequence(box) if box is not None else None,
        )


def _relpath(path: Path, base: Path) -> str:
    try:
        return Path(os.path.relpath(Path(path).absolute(), Path(base).absolute())).as_posix()
    except ValueError:  # different drive on windows
        return Path(path).absolute().as_posix()


@dataclass
class DatasetManifest:
    records: list[Record]
    class_count: int
    class_names: list[str]
    resolution: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.records = list(self.records)
        self.class_names = list(self.class_names)
        if self.resolution is not None:
            self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        self.validate()

    def validate(self) -> None:
        if len(self.class_names) != self.class_count:
            raise ManifestError(
                f"{len(self.class_names)} class names for class_count {self.class_count}"
            )
        seen: set[Path] = set()
        for r in self.records:
            if not 1 <= r.class_id <= self.class_count:
                raise ManifestError(
                    f"class id {r.class_id} of {r.image_ref} outside [1, {self.class_count}]"
                )
            key = _key(r.image_ref)
            if key in seen:
                raise ManifestError(f"duplicate image reference {r.image_ref}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def subset(self, records: Iterable[Record], **meta) -> "DatasetManifest":
        return DatasetManifest(
            records=list(records),
            class_count=self.class_count,
            class_names=self.class_names,
            resolution=self.resolution,
            meta={**self.meta, **meta},
        )

    def class_counts(self, split: str | None = None) -> dict[int, int]:
        counts = Counter(r.class_id for r in self.records if split is None or r.split == split)
        return {c: counts.get(c, 0) for c in range(1, self.class_count + 1)}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent
        header = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "class_count": self.class_count,
            "class_names": self.class_names,
            "resolution": list(self.resolution) if self.resolution else None,
            "meta": self.meta,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(r.to_json(base), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != MANIFEST_FORMAT:
                raise ManifestError(f"{path} is not a manifest file")
            if header.get("version") != MANIFEST_VERSION:
                raise ManifestError(f"unsupported manifest version {header.get('version')}")
            records = [Record.from_json(json.loads(line), path.parent) for line in fh if line.strip()]
        res = header.get("resolution")
        return cls(
            records=records,
            class_count=header["class_count"],
            class_names=header["class_names"],
            resolution=tuple(res) if res else None,
            meta=header.get("meta", {}),
        )


def _key(path: Path) -> Path:
    return Path(os.path.normpath(Path(path).absolute()))


# ---------------------------------------------------------------------------
# image io


def read_image(path: str | Path) -> np.ndarray:
    """Decode an image file into an ``(H, W, 3)`` uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(array: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")
    return path


def _decode_check(path: Path) -> tuple[tuple[int, int] | None, str | None]:
    try:
        with Image.open(path) as im:
            im.load()
            return im.size, None
    except Exception as exc:  # PIL raises a zoo of exception types
        return None, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# ingestion


def read_landmark_file(path: str | Path) -> dict[str, LandmarkSet]:
    out: dict[str, LandmarkSet] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 15:
            raise ManifestError(f"{path}:{lineno}: expected a path and 14 coordinates")
        if parts[0] in out:
            raise ManifestError(f"{path}:{lineno}: duplicate landmarks for {parts[0]}")
        out[parts[0]] = LandmarkSet.from_array([float(v) for v in parts[1:]])
    return out


def write_landmark_file(entries: Iterable[tuple[str, LandmarkSet]], path: str | Path) -> Path:
    path = Path(path)
    lines = [name + " " + " ".join(f"{v:.6f}" for v in lm.flat()) for name, lm in entries]
    path.write_text("\n".join(lines) + "\n")
    return path


def _scan_class_folders(root: Path) -> list[tuple[str, str, str]]:
    """Return ``(relative path, class name, split)`` triples."""
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    split_layout = bool(dirs) and all(d.name in SPLITS for d in dirs)
    items = []
    groups = [(d.name, d) for d in dirs] if split_layout else [("train", root)]
    for split, base in groups:
        for class_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            for f in sorted(class_dir.iterdir()):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    items.append((f.relative_to(root).as_posix(), class_dir.name, split))
    return items


def _scan_annotation_file(root: Path) -> list[tuple[str, str, str]]:
    ann = root / "annotations.txt"
    if not ann.is_file():
        raise ManifestError(f"missing annotation file {ann}")
    items = []
    for lineno, line in enumerate(ann.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ManifestError(f"{ann}:{lineno}: expected '<path> <class> <split>'")
        items.append((parts[0], parts[1], parts[2]))
    return items


def _scan_oxford(root: Path) -> list[tuple[str, str, str]]:
    items = []
    for fname, split in (("trainval.txt", "train"), ("test.txt", "test")):
        listing = root / "annotations" / fname
        if not listing.is_file():
            raise ManifestError(f"missing split list {listing}")
        for line in listing.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            stem = line.split()[0]
            breed = stem.rsplit("_", 1)[0]
            items.append((f"images/{stem}.jpg", breed, split))
    return items


def ingest_directory(root: str | Path, layout: str = "class-per-folder", workers: int | None = None) -> DatasetManifest:
    """Build a manifest from an image directory.

    Class ids follow the sorted order of class names, starting at 1. Files
    that fail to decode are left out of the manifest and listed in
    ``meta["skipped"]``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    if layout == "class-per-folder":
        items = _scan_class_folders(root)
    elif layout == "annotation-file":
        items = _scan_annotation_file(root)
    elif layout == "oxford-pets":
        items = _scan_oxford(root)
    else:
        raise ManifestError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not items:
        raise ManifestError(f"no images found under {root}")

    dupes = [p for p, n in Counter(p for p, _, _ in items).items() if n > 1]
    if dupes:
        raise ManifestError(f"duplicate image path(s): {', '.join(sorted(dupes)[:5])}")

    class_names = sorted({c for _, c, _ in items})
    class_ids = {name: i + 1 for i, name in enumerate(class_names)}
    landmark_file = root / "landmarks.txt"
    landmarks = read_landmark_file(landmark_file) if landmark_file.is_file() else {}

    with ThreadPoolExecutor(max_workers=workers) as pool:
        checks = list(pool.map(_decode_check, [root / p for p, _, _ in items]))

    records, skipped, sizes = [], [], set()
    for (rel, cname, split), (size, err) in zip(items, checks):
        if err is not None:
            logger.warning("skipping undecodable image %s (%s)", rel, err)
            skipped.append({"image": rel, "reason": err})
            continue
        sizes.add(size)
        records.append(
            Record(
                image_ref=root / rel,
                class_id=class_ids[cname],
                split=split,
                landmarks=landmarks.get(rel),
            )
        )

    present = {r.class_id for r in records}
    empty = [n for n in class_names if class_ids[n] not in present]
    if empty:
        raise ManifestError(f"no decodable images for class(es): {', '.join(empty)}")

    return DatasetManifest(
        records=records,
        class_count=len(class_names),
        class_names=class_names,
        resolution=sizes.pop() if len(sizes) == 1 else None,
        meta={"source": {"layout": layout}, "skipped": skipped},
    )


# ---------------------------------------------------------------------------
# subsetting, resizing, merging


def subset_size(fraction: float, n: int) -> int:
    """``floor(fraction * n)`` evaluated on the decimal value of ``fraction``."""
    return int(Fraction(repr(float(fraction))) * n)


def stratified_subset(m: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep ``floor(fraction * n_c)`` train records of every class.

    Selection is a seeded permutation per class; other splits are passed
    through and record order is preserved.
    """
    if not 0.0 < fraction <= 1.0:
        raise ManifestError(f"fraction must lie in (0, 1], got {fraction}")
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(m.records):
        if r.split == "train":
            by_class[r.class_id].append(i)

    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for cid in range(1, m.class_count + 1):
        idx = by_class.get(cid, [])
        k = subset_size(fraction, len(idx))
        if k < 1:
            raise ManifestError(
                f"fraction {fraction} leaves no train records for class "
                f"{m.class_names[cid - 1]!r} ({len(idx)} available)"
            )
        order = rng.permutation(len(idx))
        keep.update(idx[j] for j in order[:k])

    records = [r for i, r in enumerate(m.records) if r.split != "train" or i in keep]
    return m.subset(records, subset={"fraction": fraction, "seed": seed, "stratified": True})


def _resize_one(args) -> tuple[Path, LandmarkSet | None]:
    idx, rec, size, out_dir, preserve_aspect, reencode = args
    w, h = size
    with Image.open(rec.image_ref) as im:
        src_w, src_h = im.size
        dst = out_dir / f"{idx:06d}.png"
        if (src_w, src_h) == (w, h) and not reencode:
            dst = out_dir / f"{idx:06d}{rec.image_ref.suffix.lower()}"
            shutil.copyfile(rec.image_ref, dst)
            return dst, rec.landmarks
        im = im.convert("RGB")
        if preserve_aspect:
            scale = min(w / src_w, h / src_h)
            nw, nh = max(1, round(src_w * scale)), max(1, round(src_h * scale))
            ox, oy = (w - nw) // 2, (h - nh) // 2
            canvas = Image.new("RGB", (w, h))
            canvas.paste(im.resize((nw, nh), Image.BILINEAR), (ox, oy))
            canvas.save(dst, format="PNG")
            sx, sy = nw / src_w, nh / src_h
        else:
            im.resize((w, h), Image.BILINEAR).save(dst, format="PNG")
            ox = oy = 0
            sx, sy = w / src_w, h / src_h
    lm = None
    if rec.landmarks is not None:
        pts = rec.landmarks.to_array() * np.array([sx, sy]) + np.array([ox, oy])
        lm = LandmarkSet.from_array(pts)
    return dst, lm


def resize_images(
    m: DatasetManifest,
    size: tuple[int, int],
    out_dir: str | Path,
    preserve_aspect: bool = False,
    reencode: bool = True,
    workers: int | None = None,
) -> DatasetManifest:
    """Write resized copies of every image and return a manifest for them.

    By default the aspect ratio is not preserved. ``preserve_aspect=True``
    letterboxes onto a black canvas instead. Files already at ``size`` are
    copied byte for byte when ``reencode`` is off. Landmarks are mapped into
    the new pixel frame.
    """
    w, h = int(size[0]), int(size[1])
    if w <= 0 or h <= 0:
        raise ManifestError(f"resize target must be positive, got {size}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise ManifestError(f"output directory {out_dir} is not writable: {exc}") from exc

    jobs = [(i, r, (w, h), out_dir, preserve_aspect, reencode) for i, r in enumerate(m.records)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_resize_one, jobs))
    records = [replace(r, image_ref=dst, landmarks=lm) for r, (dst, lm) in zip(m.records, results)]
    out = m.subset(records, resize={"size": [w, h], "preserve_aspect": preserve_aspect})
    out.resolution = (w, h)
    return out


def merge(real: DatasetManifest, synthetic: DatasetManifest, per_class_cap: int | None = None) -> DatasetManifest:
    """Union of real records with (optionally capped) synthetic train records.

    Synthetic records keep manifest order; the first ``per_class_cap`` of
    each class are retained.
    """
    if real.class_count != synthetic.class_count or real.class_names != synthetic.class_names:
        raise ManifestError("class maps of the real and synthetic manifests differ")
    if per_class_cap is not None and per_class_cap < 0:
        raise ManifestError("per_class_cap must be non-negative")
    taken: Counter = Counter()
    extra = []
    for r in synthetic.records:
        if r.split != "train":
            raise ContaminationError(f"synthetic record {r.image_ref} is in the {r.split} split")
        if per_class_cap is not None and taken[r.class_id] >= per_class_cap:
            continue
        taken[r.class_id] += 1
        extra.append(r if r.provenance == "synthetic" else replace(r, provenance="synthetic"))
    resolution = real.resolution if real.resolution == synthetic.resolution or not synthetic.records else None
    merged = real.subset(
        list(real.records) + extra,
        merge={"synthetic": len(extra), "per_class_cap": per_class_cap},
    )
    merged.resolution = resolution
    return merged


def load_tensor_batch(records: Sequence[Record], size: tuple[int, int] | None = None):
    """Stack record images into a float tensor ``(N, 3, H, W)`` scaled to [-1, 1]."""
    import torch

    arrays = []
    for r in records:
        img = read_image(r.image_ref)
        if size is not None and (img.shape[1], img.shape[0]) != tuple(size):
            img = np.asarray(Image.fromarray(img).resize(tuple(size), Image.BILINEAR))
        arrays.append(img)
    x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0
