"""Facial keypoint regression: normalization, augmentation, training, RMSE.

Coordinates are normalized against an anchor box. The anchor used
throughout is the full model input frame, so a point at the image center
maps to ``(0, 0)`` and the frame corners to ``(+-0.5, +-0.5)``. The training
loss is mean squared error on normalized coordinates; RMSE is reported in
pixels at the model input resolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .dataset import DatasetManifest, ManifestError, Record, read_image
from .schema import MIRROR_PERMUTATION, NUM_POINTS, LandmarkSet

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cropgan-landmark-model"
CHECKPOINT_VERSION = 1
BACKBONES = ("small-conv", "mobile-inverted-residual")


class LandmarksOutOfFrame(ValueError):
    """An augmentation moved every landmark outside the image."""


# ---------------------------------------------------------------------------
# normalization


def normalize_landmarks(l: LandmarkSet, anchor_center, anchor_size) -> LandmarkSet:
    cx, cy = anchor_center
    w, h = anchor_size
    if not (w > 0 and h > 0):
        raise ValueError(f"anchor size must be strictly positive, got {anchor_size}")
    pts = (l.to_array() - np.array([cx, cy])) / np.array([w, h])
    return LandmarkSet.from_array(pts)


def denormalize_landmarks(l: LandmarkSet, anchor_center, anchor_size) -> LandmarkSet:
    cx, cy = anchor_center
    w, h = anchor_size
    if not (w > 0 and h > 0):
        raise ValueError(f"anchor size must be strictly positive, got {anchor_size}")
    pts = l.to_array() * np.array([w, h]) + np.array([cx, cy])
    return LandmarkSet.from_array(pts)


def frame_anchor(width: float, height: float) -> tuple[tuple[float, float], tuple[float, float]]:
    return (width / 2.0, height / 2.0), (float(width), float(height))


# ---------------------------------------------------------------------------
# paired augmentation


def _resolve(value, rng: np.random.Generator) -> float:
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return float(value)


def augment_training_pair(image: np.ndarray, l: LandmarkSet, ops: Sequence, seed: int | None = None):
    """Apply the same geometric transform to an image and its landmarks.

    ``ops`` is applied in order; each entry is ``"mirror"``, ``("rotate",
    degrees)`` or ``("zoom", scale)``. An angle or scale given as a
    ``(lo, hi)`` pair is drawn uniformly using ``seed``. Rotation and zoom act
    about the image center; positive angles turn +x towards +y.

    Mirroring swaps left/right point identities. Raises
    :class:`LandmarksOutOfFrame` when no landmark stays inside the frame.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    rng = np.random.default_rng(seed)
    c = np.array([w / 2.0, h / 2.0])
    fwd = np.eye(3)
    mirrored = False
    pixel_affine = False
    for op in ops:
        name, arg = (op, None) if isinstance(op, str) else (op[0], op[1])
        if name == "mirror":
            step = np.array([[-1.0, 0.0, w], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            mirrored = not mirrored
        elif name == "rotate":
            t = math.radians(_resolve(arg, rng))
            cos, sin = math.cos(t), math.sin(t)
            rot = np.array([[cos, -sin], [sin, cos]])
            step = np.eye(3)
            step[:2, :2] = rot
            step[:2, 2] = c - rot @ c
            pixel_affine = True
        elif name == "zoom":
            s = _resolve(arg, rng)
            if s <= 0:
                raise ValueError(f"zoom factor must be positive, got {s}")
            step = np.array([[s, 0.0, (1 - s) * c[0]], [0.0, s, (1 - s) * c[1]], [0.0, 0.0, 1.0]])
            pixel_affine = True
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
        fwd = step @ fwd

    pts = l.to_array()
    moved = (np.c_[pts, np.ones(NUM_POINTS)] @ fwd.T)[:, :2]
    if mirrored:
        moved = moved[list(MIRROR_PERMUTATION)]
    out_l = LandmarkSet.from_array(moved)
    if not any(out_l.inside(w, h)):
        raise LandmarksOutOfFrame("augmentation moved all landmarks out of frame")

    if not pixel_affine:
        out_img = image[:, ::-1].copy() if mirrored else image.copy()
    else:
        inv = np.linalg.inv(fwd)
        coeffs = tuple(inv[0]) + tuple(inv[1])
        out_img = np.asarray(
            Image.fromarray(image).transform((w, h), Image.AFFINE, coeffs, resample=Image.BILINEAR)
        )
    return out_img, out_l


def sample_ops(rng: np.random.Generator, mirror_prob: float, max_rotate: float, zoom_range) -> list:
    ops: list = []
    if rng.random() < mirror_prob:
        ops.append("mirror")
    if max_rotate > 0:
        ops.append(("rotate", float(rng.uniform(-max_rotate, max_rotate))))
    lo, hi = zoom_range
    if (lo, hi) != (1.0, 1.0):
        ops.append(("zoom", float(rng.uniform(lo, hi))))
    return ops


# ---------------------------------------------------------------------------
# model


@dataclass
class LandmarkModelConfig:
    input_size: tuple[int, int] = (224, 224)
    head_widths: list[int] = field(default_factory=lambda: [128, 128])
    output_dim: int = 2 * NUM_POINTS
    backbone: str = "small-conv"
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    normalize: bool = True
    mirror_prob: float = 0.5
    max_rotate: float = 10.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.zoom_range = tuple(float(v) for v in self.zoom_range)
        self.head_widths = [int(v) for v in self.head_widths]
        if self.output_dim != 2 * NUM_POINTS:
            raise ValueError(f"output_dim must be {2 * NUM_POINTS}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def _small_conv_backbone(input_size: tuple[int, int]) -> tuple[nn.Module, int]:
    layers: list[nn.Module] = [nn.Conv2d(3, 16, 3, 1, 1), nn.ReLU(inplace=True)]
    ch, side = 16, min(input_size)
    while side > 4:
        nxt = min(ch * 2, 128)
        layers += [nn.Conv2d(ch, nxt, 3, 2, 1), nn.ReLU(inplace=True)]
        ch, side = nxt, (side + 1) // 2
    # flatten keeps spatial layout, which a global pool would throw away
    layers += [nn.AdaptiveAvgPool2d(4), nn.Flatten()]
    return nn.Sequential(*layers), ch * 16


def _mobile_backbone() -> tuple[nn.Module, int]:
    from torchvision.models import mobilenet_v2

    features = mobilenet_v2(weights=None).features
    return nn.Sequential(features, nn.AdaptiveMaxPool2d(1), nn.Flatten()), 1280


class LandmarkNet(nn.Module):
    def __init__(self, cfg: LandmarkModelConfig):
        super().__init__()
        if cfg.backbone == "small-conv":
            self.backbone, width = _small_conv_backbone(cfg.input_size)
        else:
            self.backbone, width = _mobile_backbone()
        head: list[nn.Module] = []
        for hw in cfg.head_widths:
            head += [nn.Linear(width, hw), nn.ReLU(inplace=True)]
            width = hw
        head.append(nn.Linear(width, cfg.output_dim))
        self.head = nn.Sequential(*head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def _to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def _prepare(image: np.ndarray, landmarks: LandmarkSet | None, size: tuple[int, int]):
    h, w = image.shape[:2]
    if (w, h) != tuple(size):
        image = np.asarray(Image.fromarray(image).resize(tuple(size), Image.BILINEAR))
        if landmarks is not None:
            landmarks = LandmarkSet.from_array(
                landmarks.to_array() * np.array([size[0] / w, size[1] / h])
            )
    return image, landmarks


class LandmarkModel:
    """Trained keypoint regressor; immutable after training."""

    def __init__(self, cfg: LandmarkModelConfig, net: LandmarkNet):
        self.cfg = cfg
        self.net = net.eval()

    def _encode(self, l: LandmarkSet) -> np.ndarray:
        if not self.cfg.normalize:
            return l.to_array().reshape(-1)
        center, size = frame_anchor(*self.cfg.input_size)
        return normalize_landmarks(l, center, size).to_array().reshape(-1)

    def _decode(self, values: np.ndarray) -> LandmarkSet:
        l = LandmarkSet.from_array(values)
        if not self.cfg.normalize:
            return l
        center, size = frame_anchor(*self.cfg.input_size)
        return denormalize_landmarks(l, center, size)

    @torch.no_grad()
    def predict_batch(self, images: Sequence[np.ndarray]) -> list[LandmarkSet]:
        prepared, scales = [], []
        for img in images:
            img = np.asarray(img)
            h, w = img.shape[:2]
            prepared.append(_prepare(img, None, self.cfg.input_size)[0])
            scales.append(np.array([w / self.cfg.input_size[0], h / self.cfg.input_size[1]]))
        if not prepared:
            return []
        out = self.net(_to_tensor(prepared)).double().numpy()
        result = []
        for row, scale in zip(out, scales):
            at_input = self._decode(row).to_array()
            result.append(LandmarkSet.from_array(at_input * scale))
        return result

    def predict(self, image) -> LandmarkSet:
        if isinstance(image, (str, Path)):
            image = read_image(image)
        return self.predict_batch([image])[0]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config": asdict(self.cfg),
                "state_dict": self.net.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "LandmarkModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} landmark checkpoint")
        cfg = LandmarkModelConfig(**blob["config"])
        net = LandmarkNet(cfg)
        net.load_state_dict(blob["state_dict"])
        return cls(cfg, net)


def predict_landmarks(model: LandmarkModel, image) -> LandmarkSet:
    return model.predict(image)


@dataclass
class TrainingReport:
    curve: list[dict] = field(default_factory=list)
    loss: str = "mse-normalized"
    anchor: str = "input-frame"
    skipped_augmentations: int = 0
    n_train: int = 0
    n_val: int = 0

    @property
    def final_val_rmse(self) -> float | None:
        return self.curve[-1]["val_rmse"] if self.curve else None

    def to_dict(self) -> dict:
        return asdict(self)


def _require_landmarks(records: Sequence[Record], what: str) -> None:
    missing = [str(r.image_ref) for r in records if r.landmarks is None]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ManifestError(f"{len(missing)} {what} record(s) lack landmarks: {shown}")


def _load_pairs(records: Sequence[Record], size) -> tuple[list[np.ndarray], list[LandmarkSet]]:
    images, marks = [], []
    for r in records:
        img, lm = _prepare(read_image(r.image_ref), r.landmarks, size)
        images.append(img)
        marks.append(lm)
    return images, marks


def train_landmark_model(
    cfg: LandmarkModelConfig, train: DatasetManifest, val: DatasetManifest
) -> tuple[LandmarkModel, TrainingReport]:
    """Fit the keypoint regressor and track validation RMSE per epoch."""
    _require_landmarks(train.records, "train")
    _require_landmarks(val.records, "val")
    torch.manual_seed(cfg.seed)
    net = LandmarkNet(cfg)
    model = LandmarkModel(cfg, net)
    report = TrainingReport(
        loss="mse-normalized" if cfg.normalize else "mse-pixels",
        anchor="input-frame" if cfg.normalize else "none",
        n_train=len(train),
        n_val=len(val),
    )
    if cfg.epochs == 0:
        return model, report

    train_imgs, train_marks = _load_pairs(train.records, cfg.input_size)
    val_imgs, val_marks = _load_pairs(val.records, cfg.input_size)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    n = len(train_imgs)

    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=order_gen).tolist()
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch_imgs, batch_targets = [], []
            for i in perm[start : start + cfg.batch_size]:
                rng = np.random.default_rng([cfg.seed, epoch, i])
                ops = sample_ops(rng, cfg.mirror_prob, cfg.max_rotate, cfg.zoom_range)
                try:
                    img, lm = augment_training_pair(train_imgs[i], train_marks[i], ops)
                except LandmarksOutOfFrame:
                    report.skipped_augmentations += 1
                    img, lm = train_imgs[i], train_marks[i]
                batch_imgs.append(img)
                batch_targets.append(model._encode(lm))
            x = _to_tensor(batch_imgs)
            y = torch.from_numpy(np.stack(batch_targets)).float()
            loss = torch.mean((net(x) - y) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch_imgs)
            seen += len(batch_imgs)
        net.eval()
        preds = model.predict_batch(val_imgs) if val_imgs else []
        val_rmse = rmse(preds, val_marks) if preds else float("nan")
        report.curve.append({"epoch": epoch + 1, "train_loss": total / seen, "val_rmse": val_rmse})
        logger.info("landmarks epoch %d loss %.5f val rmse %.3f", epoch + 1, total / seen, val_rmse)
    return model, report


# ---------------------------------------------------------------------------
# evaluation


def point_distances(predicted: Sequence[LandmarkSet], truth: Sequence[LandmarkSet]) -> np.ndarray:
    """Euclidean distance per point, shape ``(images, 7)``."""
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} truths")
    if not predicted:
        return np.zeros((0, NUM_POINTS))
    p = np.stack([l.to_array() for l in predicted])
    t = np.stack([l.to_array() for l in truth])
    return np.sqrt(np.sum((p - t) ** 2, axis=-1))


def rmse(predicted: Sequence[LandmarkSet], truth: Sequence[LandmarkSet]) -> float:
    """Mean Euclidean distance over every predicted/true point pair."""
    d = point_distances(predicted, truth)
    if d.size == 0:
        raise ValueError("rmse of an empty set is undefined")
    return float(d.mean())


def filter_outliers(
    preds: Sequence[tuple[Record, LandmarkSet]],
    method: str = "distance-threshold",
    k: float = 3.0,
    area_range: tuple[float, float] = (0.005, 1.0),
) -> tuple[list, list]:
    """Split predictions into kept and removed lists.

    ``distance-threshold`` compares each image's mean point error against
    ``median + k * IQR`` over the set and removes those strictly above it.
    It needs ground-truth landmarks on every record.

    ``geometric`` needs no ground truth: a prediction is removed when its
    landmark bounding box covers a fraction of the image area outside
    ``area_range`` or when no point lies inside the image.
    """
    preds = list(preds)
    if not preds:
        raise ValueError("cannot filter an empty prediction list")
    if method == "distance-threshold":
        _require_landmarks([r for r, _ in preds], "evaluated")
        errors = point_distances([p for _, p in preds], [r.landmarks for r, _ in preds]).mean(axis=1)
        med = float(np.median(errors))
        q1, q3 = np.percentile(errors, [25, 75])
        iqr = float(q3 - q1)
        limit = math.inf if math.isinf(k) else med + k * iqr
        bad = errors > limit
    elif method == "geometric":
        lo, hi = area_range
        bad = []
        for rec, lm in preds:
            with Image.open(rec.image_ref) as im:
                w, h = im.size
            pts = lm.to_array()
            span = pts.max(axis=0) - pts.min(axis=0)
            ratio = float(span[0] * span[1]) / float(w * h)
            bad.append(not any(lm.inside(w, h)) or not lo <= ratio <= hi)
    else:
        raise ValueError(f"unknown outlier method {method!r}")
    kept = [p for p, b in zip(preds, bad) if not b]
    removed = [p for p, b in zip(preds, bad) if b]
    return kept, removed
