"""Classification harness: fine-tune a backbone on a manifest, measure accuracy."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import ContaminationError, DatasetManifest, ManifestError, Record, load_tensor_batch, _key
from .metrics import accuracy

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cropgan-classifier"
CHECKPOINT_VERSION = 1
VARIANTS = ("original", "augmented", "cropped-augmented")
FRACTIONS = (0.1, 0.5, 1.0)

BackboneFactory = Callable[["ClassifierConfig", int], nn.Module]
_BACKBONES: dict[str, BackboneFactory] = {}


def register_backbone(name: str, factory: BackboneFactory) -> None:
    """Make ``factory(cfg, class_count) -> nn.Module`` selectable by name.

    ``hybrid-external`` is reserved for a large pretrained model supplied
    by the caller; nothing is registered under it by default.
    """
    _BACKBONES[name] = factory


@dataclass
class ClassifierConfig:
    backbone: str = "small-conv"
    input_size: int = 128
    epochs: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    width: int = 32
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class SmallConvNet(nn.Module):
    def __init__(self, cfg: ClassifierConfig, class_count: int):
        super().__init__()
        ch = cfg.width
        layers: list[nn.Module] = [nn.Conv2d(3, ch, 3, 1, 1), nn.BatchNorm2d(ch), nn.ReLU(inplace=True)]
        side = cfg.input_size
        while side > 4:
            nxt = min(ch * 2, 256)
            layers += [nn.Conv2d(ch, nxt, 3, 2, 1), nn.BatchNorm2d(nxt), nn.ReLU(inplace=True)]
            ch, side = nxt, (side + 1) // 2
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(ch, class_count)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


register_backbone("small-conv", lambda cfg, c: SmallConvNet(cfg, c))


def _build(cfg: ClassifierConfig, class_count: int) -> nn.Module:
    if cfg.backbone not in _BACKBONES:
        raise ValueError(
            f"backbone {cfg.backbone!r} is not registered; call register_backbone() first"
        )
    torch.manual_seed(cfg.seed)
    return _BACKBONES[cfg.backbone](cfg, class_count)


class ClassifierModel:
    def __init__(self, cfg: ClassifierConfig, net: nn.Module, class_names: Sequence[str]):
        self.cfg = cfg
        self.net = net.eval()
        self.class_names = list(class_names)

    @property
    def input_size(self) -> int:
        return self.cfg.input_size

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
        """1-based class ids for a ``(N, 3, H, W)`` batch in [-1, 1]."""
        self.net.eval()
        out = [self.net(images[i : i + batch]).argmax(dim=1) for i in range(0, len(images), batch)]
        return torch.cat(out) + 1 if out else torch.empty(0, dtype=torch.long)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config": self.cfg.to_dict(),
                "class_names": self.class_names,
                "state_dict": self.net.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} classifier checkpoint")
        cfg = ClassifierConfig.from_dict(blob["config"])
        net = _build(cfg, len(blob["class_names"]))
        net.load_state_dict(blob["state_dict"])
        return cls(cfg, net, blob["class_names"])


def check_no_synthetic(records: Sequence[Record], what: str) -> None:
    bad = [r for r in records if r.provenance != "real"]
    if bad:
        raise ContaminationError(
            f"{len(bad)} synthetic record(s) in the {what} set, e.g. {bad[0].image_ref}"
        )


def train_classifier(
    cfg: ClassifierConfig, train: DatasetManifest, val: DatasetManifest | None = None
) -> tuple[ClassifierModel, list[dict]]:
    """Train on the manifest's train split; returns the model and a per-epoch curve."""
    check_no_synthetic([r for r in train.records if r.split != "train"], "evaluation split of the training manifest")
    if val is not None:
        check_no_synthetic(val.records, "validation")
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    records = train.split("train")
    empty = [train.class_names[c - 1] for c, n in train.class_counts("train").items() if n == 0]
    if empty:
        raise ManifestError(f"no training images for class(es): {', '.join(empty)}")

    net = _build(cfg, train.class_count)
    model = ClassifierModel(cfg, net, train.class_names)
    curve: list[dict] = []
    if cfg.epochs == 0:
        return model, curve

    size = (cfg.input_size, cfg.input_size)
    x = load_tensor_batch(records, size)
    y = torch.tensor([r.class_id - 1 for r in records])
    if val is not None and val.records:
        vx = load_tensor_batch(val.records, size)
        vy = torch.tensor([r.class_id - 1 for r in val.records])
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        entry = {"epoch": epoch + 1, "train_loss": total / len(x)}
        if val is not None and val.records:
            net.eval()
            with torch.no_grad():
                entry["val_loss"] = float(F.cross_entropy(net(vx), vy))
        curve.append(entry)
        logger.info("classifier epoch %d %s", epoch + 1, entry)
    net.eval()
    return model, curve


@dataclass
class AccuracyReport:
    accuracy: float
    n: int
    per_class: dict[str, float] = field(default_factory=dict)
    per_class_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, test: DatasetManifest, split: str = "test") -> AccuracyReport:
    """Accuracy on ``split`` with a per-class breakdown.

    Refuses any manifest that carries synthetic records at all.
    """
    check_no_synthetic(test.records, "evaluation")
    records = test.split(split)
    if not records:
        raise ManifestError(f"no {split} records to evaluate")
    size = getattr(model, "input_size", None)
    x = load_tensor_batch(records, (size, size) if size else None)
    preds = [int(v) for v in model.predict(x)]
    labels = [r.class_id for r in records]
    per_class, counts = {}, {}
    for cid in sorted(set(labels)):
        hits = [p == t for p, t in zip(preds, labels) if t == cid]
        name = test.class_names[cid - 1]
        per_class[name] = sum(hits) / len(hits)
        counts[name] = len(hits)
    return AccuracyReport(accuracy=accuracy(preds, labels), n=len(labels), per_class=per_class, per_class_counts=counts)


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass
class MatrixCell:
    train: DatasetManifest
    test: DatasetManifest
    fid: float | None = None


@dataclass
class ResultRow:
    variant: str
    fraction: float
    fid: float | None
    accuracy: float
    n_train: int
    n_synthetic: int
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)


def check_disjoint(train: DatasetManifest, test: DatasetManifest) -> None:
    train_keys = {_key(r.image_ref) for r in train.split("train")}
    shared = [r.image_ref for r in test.split("test") if _key(r.image_ref) in train_keys]
    if shared:
        raise ContaminationError(f"{len(shared)} test image(s) also in training data, e.g. {shared[0]}")


def run_cell(cfg: ClassifierConfig, cell: MatrixCell, variant: str, fraction: float) -> tuple[ResultRow, ClassifierModel]:
    check_disjoint(cell.train, cell.test)
    model, _ = train_classifier(cfg, cell.train)
    report = evaluate(model, cell.test)
    train_records = cell.train.split("train")
    row = ResultRow(
        variant=variant,
        fraction=fraction,
        fid=None if variant == "original" else cell.fid,
        accuracy=report.accuracy,
        n_train=len(train_records),
        n_synthetic=sum(r.provenance == "synthetic" for r in train_records),
        n_test=report.n,
    )
    return row, model


def run_matrix(
    cells: Mapping[tuple[str, float], MatrixCell],
    cfg: ClassifierConfig,
    variants: Sequence[str] = VARIANTS,
    fractions: Sequence[float] = FRACTIONS,
) -> list[ResultRow]:
    wanted = [(v, f) for v in variants for f in fractions]
    missing = [f"{v}:{f:g}" for v, f in wanted if (v, f) not in cells]
    if missing:
        raise KeyError(f"missing manifest for cell(s) {', '.join(missing)}")
    return [run_cell(cfg, cells[(v, f)], v, f)[0] for v, f in wanted]


def format_results_table(rows: Sequence[ResultRow]) -> str:
    """Markdown table with one FID/accuracy column pair per data fraction."""
    fractions = sorted({r.fraction for r in rows})
    variants = [v for v in VARIANTS if any(r.variant == v for r in rows)]
    variants += sorted({r.variant for r in rows} - set(variants))
    lookup = {(r.variant, r.fraction): r for r in rows}
    head = ["Dataset variant"]
    for f in fractions:
        head += [f"FID ({f:.0%})", f"Accuracy ({f:.0%})"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for v in variants:
        cells = [v]
        for f in fractions:
            r = lookup.get((v, f))
            if r is None:
                cells += ["", ""]
                continue
            cells.append("--" if r.fid is None else f"{r.fid:.1f}")
            cells.append(f"{100 * r.accuracy:.2f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_results(rows: Sequence[ResultRow], path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"meta": meta or {}}, sort_keys=True)]
    lines += [json.dumps(r.to_dict(), sort_keys=True) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_results(path: str | Path) -> tuple[dict, list[ResultRow]]:
    lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    return lines[0]["meta"], [ResultRow(**d) for d in lines[1:]]
