"""End-to-end experiment pipeline with content-hashed stage caching.

Every stage writes into its own directory under the output root and leaves
a ``stamp.json`` there recording the hashes of its inputs, its config
section and every file it produced. A stage whose stamp still matches is
skipped. A stage refuses to run when an input is missing, or when an input
no longer matches the hash its producing stage recorded.

Stage seeds are derived as ``sha256(global_seed:stage:cell)``; the subset
draw uses the fraction as its cell id so every variant at a given fraction
trains on the same real images.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import yaml

from . import classifier as clf
from .crop import crop_manifest
from .dataset import DatasetManifest, ingest_directory, merge, read_image, resize_images, stratified_subset
from .gan import GanCheckpoint, GanConfig, generate_per_class, read_fid_log, train_gan, write_fid_log
from .landmarks import LandmarkModel, LandmarkModelConfig, filter_outliers, rmse, train_landmark_model
from .metrics import RandomProjectionExtractor
from .plots import plot_fid_curves
from .toy import blob_centroid_baseline, generate_toy_corpus

logger = logging.getLogger(__name__)

STAMP = "stamp.json"
STAGE_LOG = "stage.log"
VARIANTS = clf.VARIANTS
GAN_VARIANTS = ("augmented", "cropped-augmented")


class PipelineError(RuntimeError):
    """A stage could not complete."""


class MissingDependency(PipelineError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(f"{stage}: missing input {path}; run the '{producer}' stage first")
        self.producer = producer


class StaleInput(PipelineError):
    def __init__(self, stage: str, path: Path, producer: str):
        super().__init__(
            f"{stage}: input {path} changed after the '{producer}' stage wrote it; rerun '{producer}'"
        )
        self.producer = producer


# ---------------------------------------------------------------------------
# configuration


def _from_dict(cls, d: dict | None):
    d = d or {}
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} key(s): {sorted(unknown)}")
    return cls(**d)


@dataclass
class DatasetSection:
    root: str | None = None
    layout: str = "class-per-folder"
    landmark_root: str | None = None
    landmark_layout: str = "class-per-folder"


@dataclass
class ToySection:
    per_class: int = 128
    size: int = 32
    test_fraction: float = 0.25
    seed: int = 0


@dataclass
class CropSection:
    margin: float = 0.6
    square: bool = True
    area_range: tuple[float, float] = (0.005, 1.0)

    def __post_init__(self):
        self.area_range = tuple(float(v) for v in self.area_range)


@dataclass
class ExtractorSection:
    kind: str = "randproj"
    dim: int = 64
    pool: int = 8
    seed: int = 0

    def build(self):
        if self.kind != "randproj":
            raise ValueError(f"unknown feature extractor {self.kind!r}; plug in a custom one via the API")
        return RandomProjectionExtractor(dim=self.dim, pool=self.pool, seed=self.seed)


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    toy: ToySection | None = None
    fractions: list[float] = field(default_factory=lambda: [0.1, 0.5, 1.0])
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    resolution: int = 128
    crop: CropSection = field(default_factory=CropSection)
    landmarks: LandmarkModelConfig = field(default_factory=LandmarkModelConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    classifier: clf.ClassifierConfig = field(default_factory=clf.ClassifierConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    synthetic_per_class: int = 200
    outlier_k: float = 3.0
    output_root: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.fractions = [float(f) for f in self.fractions]
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ValueError(f"unknown variant(s) {sorted(bad)}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if self.dataset.root is None and self.toy is None:
            raise ValueError("set dataset.root or enable the toy corpus")

    @classmethod
    def toy_preset(cls, **overrides) -> "ExperimentConfig":
        """Desk-scale preset: 2 classes x 128 procedurally drawn 32x32 images."""
        base = cls(
            toy=ToySection(),
            resolution=32,
            landmarks=LandmarkModelConfig(input_size=(32, 32), epochs=15, batch_size=32),
            gan=GanConfig(
                resolution=32, class_count=2, latent_dim=64, base_channels=8, max_channels=128,
                g_lr=0.001, d_lr=0.001, total_kimg=4, snapshot_interval_kimg=1, ada_kimg=20,
                deterministic=True,
            ),
            classifier=clf.ClassifierConfig(input_size=32, epochs=16, width=16, deterministic=True),
            synthetic_per_class=48,
            output_root="runs/toy",
        )
        for key, value in overrides.items():
            setattr(base, key, value)
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gan"] = self.gan.to_dict()
        d["landmarks"]["input_size"] = list(self.landmarks.input_size)
        d["landmarks"]["zoom_range"] = list(self.landmarks.zoom_range)
        d["crop"]["area_range"] = list(self.crop.area_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        toy = d.pop("toy", None)
        return cls(
            dataset=_from_dict(DatasetSection, d.pop("dataset", None)),
            toy=_from_dict(ToySection, toy) if toy is not None else None,
            crop=_from_dict(CropSection, d.pop("crop", None)),
            landmarks=_from_dict(LandmarkModelConfig, d.pop("landmarks", None)),
            gan=GanConfig.from_dict(d.pop("gan", None) or {}),
            classifier=_from_dict(clf.ClassifierConfig, d.pop("classifier", None)),
            extractor=_from_dict(ExtractorSection, d.pop("extractor", None)),
            **d,
        )

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def hash(self, *sections: str) -> str:
        """Hash of the named sections (all but ``output_root`` when none given)."""
        d = self.to_dict()
        d.pop("output_root")
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def stage_seed(global_seed: int, stage: str, cell: str = "") -> int:
    digest = hashlib.sha256(f"{global_seed}:{stage}:{cell}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def cell_id(variant: str, fraction: float) -> str:
    return f"{variant}_{round(fraction * 100):03d}"


def parse_cell(text: str) -> tuple[str, float]:
    variant, _, frac = text.partition(":")
    if variant not in VARIANTS or not frac:
        raise ValueError(f"cell must look like VARIANT:FRACTION with VARIANT in {VARIANTS}, got {text!r}")
    return variant, float(frac)


# ---------------------------------------------------------------------------
# hashing and stamps


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hashes(root: Path, skip: Iterable[str] = (STAMP, STAGE_LOG)) -> dict[str, str]:
    skip = set(skip)
    return {
        p.relative_to(root).as_posix(): file_hash(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def _read_stamp(stage_dir: Path) -> dict | None:
    path = stage_dir / STAMP
    return json.loads(path.read_text()) if path.is_file() else None


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Input:
    path: Path
    producer: str
    stage_dir: Path | None = None


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, root: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg.output_root)
        self.config_hash = cfg.hash()

    # layout ----------------------------------------------------------------
    @property
    def prepare_dir(self) -> Path:
        return self.root / "prepare"

    def cells(self) -> list[tuple[str, float]]:
        return [(v, f) for v in self.cfg.variants for f in self.cfg.fractions]

    def gan_cells(self) -> list[tuple[str, float]]:
        return [(v, f) for v, f in self.cells() if v in GAN_VARIANTS]

    def cell_manifest_path(self, variant: str, fraction: float) -> Path:
        return self.prepare_dir / "cells" / f"{cell_id(variant, fraction)}.jsonl"

    def gan_dir(self, variant: str, fraction: float) -> Path:
        return self.root / "gan" / cell_id(variant, fraction)

    def synthetic_dir(self, variant: str, fraction: float) -> Path:
        return self.root / "synthetic" / cell_id(variant, fraction)

    def classifier_dir(self, variant: str, fraction: float) -> Path:
        return self.root / "classifier" / cell_id(variant, fraction)

    def evaluate_dir(self, variant: str, fraction: float) -> Path:
        return self.root / "evaluate" / cell_id(variant, fraction)

    # stage runner ----------------------------------------------------------
    def _run(self, stage: str, out_dir: Path, inputs: Sequence[Input], sections: Sequence[str],
             body: Callable[[], None], extra: dict | None = None) -> bool:
        """Run ``body`` unless the stamp in ``out_dir`` is current. Returns True if it ran."""
        in_hashes = {}
        for item in inputs:
            if not item.path.is_file():
                raise MissingDependency(stage, item.path, item.producer)
            digest = file_hash(item.path)
            if item.stage_dir is not None:
                upstream = _read_stamp(item.stage_dir)
                rel = item.path.relative_to(item.stage_dir).as_posix()
                if upstream is None:
                    raise MissingDependency(stage, item.stage_dir / STAMP, item.producer)
                if upstream["outputs"].get(rel) != digest:
                    raise StaleInput(stage, item.path, item.producer)
            in_hashes[_rel(item.path, self.root)] = digest
        section_hash = self.cfg.hash(*sections) if sections else ""
        wanted = {"stage": stage, "config": section_hash, "inputs": in_hashes, "extra": extra or {}}

        current = _read_stamp(out_dir)
        if current is not None and all(current.get(k) == v for k, v in wanted.items()):
            if tree_hashes(out_dir) == current["outputs"]:
                logger.info("%s: up to date", stage)
                return False
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / STAMP).unlink(missing_ok=True)
        handler = logging.FileHandler(out_dir / STAGE_LOG, mode="w")
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root_logger = logging.getLogger("cropgan")
        root_logger.addHandler(handler)
        level = root_logger.level
        if root_logger.getEffectiveLevel() > logging.INFO:
            root_logger.setLevel(logging.INFO)
        try:
            body()
        finally:
            root_logger.removeHandler(handler)
            root_logger.setLevel(level)
            handler.close()
        wanted["outputs"] = tree_hashes(out_dir)
        (out_dir / STAMP).write_text(json.dumps(wanted, indent=1, sort_keys=True))
        return True

    # stages ----------------------------------------------------------------
    def prepare(self) -> bool:
        cfg = self.cfg
        inputs: list[Input] = []
        if cfg.dataset.root is not None:
            data_root = Path(cfg.dataset.root)
            if not data_root.is_dir():
                raise PipelineError(f"prepare: dataset root {data_root} does not exist")
            inputs = [Input(p, "dataset") for p in sorted(data_root.rglob("*")) if p.is_file()]

        def body():
            out = self.prepare_dir
            if cfg.dataset.root is not None:
                raw = ingest_directory(cfg.dataset.root, cfg.dataset.layout)
            else:
                t = cfg.toy
                corpus = generate_toy_corpus(out / "toy", t.per_class, t.size, t.test_fraction, t.seed)
                raw = ingest_directory(corpus, "class-per-folder")
            raw.save(out / "raw.jsonl")
            original = resize_images(raw, (cfg.resolution, cfg.resolution), out / "images")
            original.save(out / "original.jsonl")
            for fraction in cfg.fractions:
                seed = stage_seed(cfg.seed, "subset", f"{fraction:g}")
                sub = stratified_subset(original, fraction, seed)
                for variant in cfg.variants:
                    cell = sub.subset(sub.records, cell={"variant": variant, "fraction": fraction})
                    cell.save(self.cell_manifest_path(variant, fraction))

        return self._run("prepare", self.prepare_dir, inputs,
                         ("dataset", "toy", "fractions", "variants", "resolution", "seed"), body)

    def _landmark_data(self) -> tuple[DatasetManifest, DatasetManifest]:
        if self.cfg.dataset.landmark_root is not None:
            m = ingest_directory(self.cfg.dataset.landmark_root, self.cfg.dataset.landmark_layout)
        else:
            m = DatasetManifest.load(self.prepare_dir / "raw.jsonl")
        train = m.subset(m.split("train"))
        held = m.split("val") or m.split("test")
        return train, m.subset(held)

    def train_landmarks(self) -> bool:
        out = self.root / "landmarks"
        raw = Input(self.prepare_dir / "raw.jsonl", "prepare", self.prepare_dir)

        def body():
            train, val = self._landmark_data()
            lcfg = LandmarkModelConfig(**{**asdict(self.cfg.landmarks),
                                          "seed": stage_seed(self.cfg.seed, "train-landmarks")})
            model, report = train_landmark_model(lcfg, train, val)
            model.save(out / "model.pt")
            summary = {"config_hash": self.config_hash, "training": report.to_dict()}
            if val.records and lcfg.epochs > 0:
                preds = [model.predict(r.image_ref) for r in val.records]
                kept, removed = filter_outliers(list(zip(val.records, preds)), k=self.cfg.outlier_k)
                scale = _input_scale(val.records, lcfg.input_size)
                summary["val_rmse_px"] = rmse(_scaled(preds, scale), _scaled([r.landmarks for r in val.records], scale))
                summary["val_rmse_px_filtered"] = (
                    rmse(_scaled([p for _, p in kept], scale), _scaled([r.landmarks for r, _ in kept], scale))
                    if kept else None
                )
                summary["outliers_removed"] = len(removed)
                if self.cfg.toy is not None:
                    base = [blob_centroid_baseline(read_image(r.image_ref)) for r in val.records]
                    summary["baseline_val_rmse_px"] = rmse(
                        _scaled(base, scale), _scaled([r.landmarks for r in val.records], scale)
                    )
            (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True))

        return self._run("train-landmarks", out, [raw], ("landmarks", "seed", "outlier_k", "dataset"), body)

    def crop(self) -> bool:
        out = self.root / "crop"
        inputs = [
            Input(self.prepare_dir / "raw.jsonl", "prepare", self.prepare_dir),
            Input(self.root / "landmarks" / "model.pt", "train-landmarks", self.root / "landmarks"),
        ]

        def body():
            raw = DatasetManifest.load(self.prepare_dir / "raw.jsonl")
            model = LandmarkModel.load(self.root / "landmarks" / "model.pt")
            train = raw.subset(raw.split("train"))
            c = self.cfg.crop
            cropped, report = crop_manifest(
                train, model, c.margin, c.square, out / "images",
                out_size=(self.cfg.resolution, self.cfg.resolution), area_range=c.area_range,
            )
            cropped.save(out / "cropped.jsonl")
            report.save(out / "report.jsonl")

        return self._run("crop", out, inputs, ("crop", "resolution"), body)

    def _gan_inputs(self, variant: str, fraction: float) -> list[Input]:
        inputs = [Input(self.cell_manifest_path(variant, fraction), "prepare", self.prepare_dir)]
        if variant == "cropped-augmented":
            inputs.append(Input(self.root / "crop" / "cropped.jsonl", "crop", self.root / "crop"))
        return inputs

    def gan_training_data(self, variant: str, fraction: float) -> DatasetManifest:
        if variant == "cropped-augmented":
            cropped = DatasetManifest.load(self.root / "crop" / "cropped.jsonl")
            # same seed and per-class order as the prepared cell, hence the same images
            return stratified_subset(cropped, fraction, stage_seed(self.cfg.seed, "subset", f"{fraction:g}"))
        cell = DatasetManifest.load(self.cell_manifest_path(variant, fraction))
        return cell.subset(cell.split("train"))

    def gan_config(self, variant: str, fraction: float, class_count: int) -> GanConfig:
        d = self.cfg.gan.to_dict()
        d.update(
            resolution=self.cfg.resolution,
            class_count=class_count,
            seed=stage_seed(self.cfg.seed, "train-gan", cell_id(variant, fraction)),
        )
        return GanConfig.from_dict(d)

    def train_gan(self, variant: str, fraction: float, resume: bool = False) -> bool:
        if variant not in GAN_VARIANTS:
            raise PipelineError(f"train-gan: the {variant} variant has no generator")
        out = self.gan_dir(variant, fraction)

        def body():
            data = self.gan_training_data(variant, fraction)
            gcfg = self.gan_config(variant, fraction, data.class_count)
            start = None
            snaps = sorted(out.glob("snapshot-*.pt"))
            if resume and snaps:
                start = GanCheckpoint.load(snaps[-1])
                logger.info("resuming %s from %s", cell_id(variant, fraction), snaps[-1].name)
            else:
                for p in snaps:
                    p.unlink()
            ckpts = train_gan(gcfg, data, self.cfg.extractor.build(), resume=start, checkpoint_dir=out)
            final = ckpts[-1] if ckpts else start
            final.save(out / "final.pt")
            write_fid_log(final.fid_log, out / "fid_log.tsv")

        return self._run("train-gan", out, self._gan_inputs(variant, fraction),
                         ("gan", "extractor", "seed", "resolution"), body)

    def generate(self, variant: str, fraction: float) -> bool:
        if variant not in GAN_VARIANTS:
            raise PipelineError(f"generate: the {variant} variant has no generator")
        out = self.synthetic_dir(variant, fraction)
        gdir = self.gan_dir(variant, fraction)
        inputs = [Input(gdir / "final.pt", "train-gan", gdir),
                  Input(self.cell_manifest_path(variant, fraction), "prepare", self.prepare_dir)]

        def body():
            ckpt = GanCheckpoint.load(gdir / "final.pt")
            cell = DatasetManifest.load(self.cell_manifest_path(variant, fraction))
            gcfg = GanConfig.from_dict(ckpt.config)
            seed = stage_seed(self.cfg.seed, "generate", cell_id(variant, fraction))
            synth = generate_per_class(ckpt.generator(), self.cfg.synthetic_per_class, gcfg,
                                       out / "images", seed, cell.class_names)
            synth.save(out / "manifest.jsonl")

        return self._run("generate", out, inputs, ("synthetic_per_class", "seed"), body)

    def train_classifier(self, variant: str, fraction: float) -> bool:
        out = self.classifier_dir(variant, fraction)
        inputs = [Input(self.cell_manifest_path(variant, fraction), "prepare", self.prepare_dir)]
        if variant in GAN_VARIANTS:
            sdir = self.synthetic_dir(variant, fraction)
            inputs.append(Input(sdir / "manifest.jsonl", "generate", sdir))

        def body():
            cell = DatasetManifest.load(self.cell_manifest_path(variant, fraction))
            train = cell
            if variant in GAN_VARIANTS:
                synth = DatasetManifest.load(self.synthetic_dir(variant, fraction) / "manifest.jsonl")
                train = merge(cell, synth)
            clf.check_disjoint(train, cell)
            ccfg = clf.ClassifierConfig.from_dict({
                **self.cfg.classifier.to_dict(),
                "input_size": self.cfg.resolution,
                "seed": stage_seed(self.cfg.seed, "train-classifier", cell_id(variant, fraction)),
            })
            model, curve = clf.train_classifier(ccfg, train)
            model.save(out / "model.pt")
            train.save(out / "train.jsonl")
            (out / "curve.json").write_text(json.dumps(curve, indent=1, sort_keys=True))

        return self._run("train-classifier", out, inputs, ("classifier", "seed", "resolution"), body)

    def evaluate(self, variant: str, fraction: float) -> bool:
        out = self.evaluate_dir(variant, fraction)
        cdir = self.classifier_dir(variant, fraction)
        inputs = [Input(cdir / "model.pt", "train-classifier", cdir),
                  Input(self.cell_manifest_path(variant, fraction), "prepare", self.prepare_dir)]
        if variant in GAN_VARIANTS:
            gdir = self.gan_dir(variant, fraction)
            inputs.append(Input(gdir / "fid_log.tsv", "train-gan", gdir))

        def body():
            model = clf.ClassifierModel.load(cdir / "model.pt")
            cell = DatasetManifest.load(self.cell_manifest_path(variant, fraction))
            report = clf.evaluate(model, cell)
            fid = None
            if variant in GAN_VARIANTS:
                fid = read_fid_log(self.gan_dir(variant, fraction) / "fid_log.tsv")[-1][1]
            train = DatasetManifest.load(cdir / "train.jsonl").split("train")
            row = clf.ResultRow(
                variant=variant, fraction=fraction, fid=fid, accuracy=report.accuracy,
                n_train=len(train), n_synthetic=sum(r.provenance == "synthetic" for r in train),
                n_test=report.n,
            )
            doc = {"config_hash": self.config_hash, "row": row.to_dict(), "report": report.to_dict(),
                   "weights": model.weights_hash()}
            (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))

        return self._run("evaluate", out, inputs, ("classifier",), body)

    def summarize(self) -> bool:
        out = self.root / "results"
        inputs = [Input(self.evaluate_dir(v, f) / "report.json", "evaluate", self.evaluate_dir(v, f))
                  for v, f in self.cells()]

        def body():
            rows = [clf.ResultRow(**json.loads((self.evaluate_dir(v, f) / "report.json").read_text())["row"])
                    for v, f in self.cells()]
            meta = {
                "config_hash": self.config_hash,
                "seed": self.cfg.seed,
                "extractor": self.cfg.extractor.build().descriptor,
                "synthetic_per_class": self.cfg.synthetic_per_class,
                "subsets": "stratified per class, floor(fraction * n_c)",
            }
            clf.write_results(rows, out / "results.jsonl", meta)
            (out / "results.md").write_text(clf.format_results_table(rows))

        return self._run("evaluate", out, inputs, (), body)

    def plot(self) -> bool:
        out = self.root / "plots"
        inputs = [Input(self.gan_dir(v, f) / "fid_log.tsv", "train-gan", self.gan_dir(v, f))
                  for v, f in self.gan_cells() if (self.gan_dir(v, f) / "fid_log.tsv").is_file()]
        if not inputs:
            raise MissingDependency("plot", self.root / "gan", "train-gan")
        results = self.root / "results" / "results.jsonl"
        if results.is_file():
            inputs.append(Input(results, "evaluate", self.root / "results"))

        def body():
            logs = {(v, f): read_fid_log(self.gan_dir(v, f) / "fid_log.tsv")
                    for v, f in self.gan_cells() if (self.gan_dir(v, f) / "fid_log.tsv").is_file()}
            plot_fid_curves(logs, out)
            if results.is_file():
                _, rows = clf.read_results(results)
                (out / "table.md").write_text(clf.format_results_table(rows))

        return self._run("plot", out, inputs, (), body)

    # drivers ---------------------------------------------------------------
    def run_cell(self, variant: str, fraction: float, resume: bool = False) -> None:
        if variant in GAN_VARIANTS:
            self.train_gan(variant, fraction, resume=resume)
            self.generate(variant, fraction)
        self.train_classifier(variant, fraction)
        self.evaluate(variant, fraction)

    def run_all(self, resume: bool = False) -> None:
        self.prepare()
        if "cropped-augmented" in self.cfg.variants:
            self.train_landmarks()
            self.crop()
        for variant, fraction in self.cells():
            self.run_cell(variant, fraction, resume=resume)
        self.summarize()
        self.plot()


def _rel(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.resolve().as_posix()


def _input_scale(records, input_size) -> list[tuple[float, float]]:
    from PIL import Image

    scales = []
    for r in records:
        with Image.open(r.image_ref) as im:
            w, h = im.size
        scales.append((input_size[0] / w, input_size[1] / h))
    return scales


def _scaled(marks, scales):
    """Landmarks expressed in pixels of the model input frame."""
    from .schema import LandmarkSet
    import numpy as np

    return [LandmarkSet.from_array(m.to_array() * np.array(s)) for m, s in zip(marks, scales)]
