"""Class-conditional GAN with adaptive discriminator augmentation.

The networks are a compact DCGAN-style pair: the generator concatenates a
learned class embedding with the latent code, the discriminator uses
projection conditioning (``logit = psi(phi(x)) + <embed(y), phi(x)>``).

Augmentation strength ``p`` is steered by the sign heuristic: the running
average of ``sign(D(real))`` is compared against a target and ``p`` moves by a
fixed step after every interval, clamped to [0, 1].

Every training step draws its randomness from a generator seeded by
``(seed, step)``, so a run resumed from a checkpoint replays exactly the
same updates as an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import DatasetManifest, ManifestError, Record, load_tensor_batch, write_image
from .metrics import FeatureExtractor, fid_report

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cropgan-gan-checkpoint"
CHECKPOINT_VERSION = 1
AUGMENT_OPS = ("mirror", "rot90", "translate", "color")


class GanTrainingError(RuntimeError):
    """Training diverged; ``checkpoint`` holds the state at the failing step."""

    def __init__(self, message: str, checkpoint: "GanCheckpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class GanConfig:
    resolution: int = 128
    class_count: int = 37
    latent_dim: int = 128
    g_lr: float = 0.0025
    d_lr: float = 0.0025
    betas: tuple[float, float] = (0.0, 0.99)
    batch_size: int = 32
    base_channels: int = 32
    max_channels: int = 256
    ada_target: float = 0.6
    ada_interval_images: int = 256
    ada_kimg: float = 500.0
    ada_step: float | None = None
    ada_ema: float = 0.5
    ada_ops: tuple[str, ...] = AUGMENT_OPS
    r1_gamma: float = 0.0
    r1_interval: int = 16
    total_kimg: float = 64
    snapshot_interval_kimg: float = 4
    fid_max_samples: int = 10000
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.ada_ops = tuple(self.ada_ops)
        if self.resolution < 8 or self.resolution & (self.resolution - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {self.resolution}")
        if not 0.0 < self.ada_target < 1.0:
            raise ValueError(f"ada_target must lie in (0, 1), got {self.ada_target}")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.class_count < 1 or self.batch_size < 1:
            raise ValueError("class_count and batch_size must be >= 1")
        unknown = set(self.ada_ops) - set(AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        if self.ada_step is None:
            # p crosses [0, 1] after ada_kimg thousand images
            self.ada_step = self.ada_interval_images / (self.ada_kimg * 1000.0)

    @classmethod
    def full_scale(cls, class_count: int = 37, **overrides) -> "GanConfig":
        base = dict(resolution=128, class_count=class_count, total_kimg=5120, snapshot_interval_kimg=200,
                    base_channels=64, max_channels=512)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["ada_ops"] = list(self.ada_ops)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AdaState:
    p: float = 0.0
    r_hat: float = 0.0
    images_seen: int = 0


# ---------------------------------------------------------------------------
# networks


class PixelNorm(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


def _channels(cfg: GanConfig, res: int) -> int:
    return min(cfg.max_channels, cfg.base_channels * (cfg.resolution // res))


class Generator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.latent_dim = cfg.latent_dim
        self.resolution = cfg.resolution
        self.embed = nn.Embedding(cfg.class_count, cfg.latent_dim)
        c4 = _channels(cfg, 4)
        self.fc = nn.Linear(2 * cfg.latent_dim, c4 * 16)
        self.c4 = c4
        blocks: list[nn.Module] = []
        res, ch = 4, c4
        while res < cfg.resolution:
            nxt = _channels(cfg, res * 2)
            blocks += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, nxt, 3, 1, 1),
                nn.LeakyReLU(0.2),
                PixelNorm(),
            ]
            res, ch = res * 2, nxt
        self.blocks = nn.Sequential(*blocks)
        self.to_rgb = nn.Conv2d(ch, 3, 1)

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        h = torch.cat([PixelNorm()(z), self.embed(labels)], dim=1)
        h = F.leaky_relu(self.fc(h), 0.2).view(-1, self.c4, 4, 4)
        h = self.blocks(PixelNorm()(h))
        return torch.tanh(self.to_rgb(h))


class Discriminator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        ch = _channels(cfg, cfg.resolution)
        layers: list[nn.Module] = [nn.Conv2d(3, ch, 1), nn.LeakyReLU(0.2)]
        res = cfg.resolution
        while res > 4:
            nxt = _channels(cfg, res // 2)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.LeakyReLU(0.2)]
            res, ch = res // 2, nxt
        layers += [nn.Flatten(), nn.Linear(ch * 16, ch), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.out = nn.Linear(ch, 1)
        self.embed = nn.Embedding(cfg.class_count, ch)

    def forward(self, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        phi = self.features(images)
        return self.out(phi).squeeze(1) + (self.embed(labels) * phi).sum(dim=1)


def build_models(cfg: GanConfig) -> tuple[Generator, Discriminator]:
    """Seeded generator/discriminator pair. Labels are 0-based class indices."""
    torch.manual_seed(cfg.seed)
    return Generator(cfg), Discriminator(cfg)


# ---------------------------------------------------------------------------
# adaptive augmentation


def ada_update(s: AdaState, d_sign_batch: Sequence[float], cfg: GanConfig) -> AdaState:
    """One controller update from the signs of ``D`` on augmented reals."""
    signs = np.sign(np.asarray(d_sign_batch, dtype=np.float64))
    if signs.size == 0:
        raise ValueError("ada_update needs a non-empty batch of signs")
    r_hat = cfg.ada_ema * s.r_hat + (1.0 - cfg.ada_ema) * float(signs.mean())
    p = s.p
    if r_hat > cfg.ada_target:
        p += cfg.ada_step
    elif r_hat < cfg.ada_target:
        p -= cfg.ada_step
    p = min(1.0, max(0.0, p))
    return AdaState(p=p, r_hat=r_hat, images_seen=s.images_seen + int(signs.size))


def augment_batch(images: torch.Tensor, p: float, seed: int, ops: Sequence[str] = AUGMENT_OPS) -> torch.Tensor:
    """Independently apply each op to each image with probability ``p``.

    All ops are differentiable with respect to the pixels, so generator
    gradients pass through. Random draws happen for every op regardless of
    ``p``, which keeps the stream of decisions fixed for a given seed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    gen = torch.Generator().manual_seed(int(seed))
    n, _, h, w = images.shape
    x = images
    view = (n, 1, 1, 1)
    for op in AUGMENT_OPS:
        mask = torch.rand(n, generator=gen) < p
        if op == "mirror":
            alt = torch.flip(x, dims=[3])
        elif op == "rot90":
            k = torch.randint(1, 4, (n,), generator=gen)
            alt = x
            if h == w:
                rots = [torch.rot90(x, int(j), dims=(2, 3)) for j in (1, 2, 3)]
                alt = torch.stack(rots)[k - 1, torch.arange(n)]
        elif op == "translate":
            limit = max(1, round(min(h, w) / 8))
            shifts = torch.randint(-limit, limit + 1, (n, 2), generator=gen)
            alt = torch.stack(
                [torch.roll(x[i], (int(shifts[i, 0]), int(shifts[i, 1])), dims=(1, 2)) for i in range(n)]
            )
        else:
            bright = torch.randn(n, generator=gen).view(view) * 0.2
            contrast = torch.exp2(torch.randn(n, generator=gen) * 0.5).view(view)
            sat = torch.exp2(torch.randn(n, generator=gen)).view(view)
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            alt = (x - mean) * contrast + mean + bright
            luma = alt.mean(dim=1, keepdim=True)
            alt = (alt - luma) * sat + luma
        if op in ops:
            x = torch.where(mask.view(view), alt, x)
    return x


# ---------------------------------------------------------------------------
# training


@dataclass
class GanCheckpoint:
    generator_state: dict
    discriminator_state: dict
    g_opt_state: dict
    d_opt_state: dict
    ada: AdaState
    kimg: float
    step: int
    fid_log: list[tuple[float, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    ada_pending: list[float] = field(default_factory=list)

    @property
    def images_seen(self) -> int:
        return int(round(self.kimg * 1000))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **asdict(self)}
        torch.save(_interned(blob), path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GanCheckpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.pop("format", None) != CHECKPOINT_FORMAT or blob.pop("version", None) != CHECKPOINT_VERSION:
            raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} GAN checkpoint")
        blob["ada"] = AdaState(**blob["ada"])
        blob["fid_log"] = [tuple(e) for e in blob["fid_log"]]
        return cls(**blob)

    def generator(self) -> Generator:
        cfg = GanConfig.from_dict(self.config)
        g = Generator(cfg)
        g.load_state_dict(self.generator_state)
        return g.eval()


def _interned(obj):
    """Intern every string so pickle memoizes them identically.

    A state dict restored from disk holds fresh string objects where a live
    one holds shared literals; without this a resumed run would save the
    same values as different bytes.
    """
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_interned(k): _interned(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_interned(v) for v in obj)
    return obj


def weights_hash(*states: dict) -> str:
    h = hashlib.sha256()
    for state in states:
        for name in sorted(state):
            h.update(name.encode())
            h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def step_seed(seed: int, step: int, salt: str = "") -> int:
    digest = hashlib.sha256(f"{seed}:{step}:{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def balanced_labels(batch: int, class_count: int, step: int) -> torch.Tensor:
    """Round-robin class labels; counts within a batch differ by at most one."""
    start = (step * batch) % class_count
    return (torch.arange(batch) + start) % class_count


def write_fid_log(fid_log: Sequence[tuple[float, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("kimg\tfid\n" + "".join(f"{k:.3f}\t{v:.6f}\n" for k, v in fid_log))
    return path


def read_fid_log(path: str | Path) -> list[tuple[float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        if line.strip():
            k, v = line.split("\t")
            rows.append((float(k), float(v)))
    return rows


@torch.no_grad()
def _sample(g: Generator, labels: torch.Tensor, seed: int, batch: int = 64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(len(labels), g.latent_dim, generator=gen)
    out = [g(z[i : i + batch], labels[i : i + batch]) for i in range(0, len(labels), batch)]
    return torch.cat(out) if out else torch.empty(0, 3, g.resolution, g.resolution)


@torch.no_grad()
def _features(extractor: FeatureExtractor, images: torch.Tensor, batch: int = 256) -> np.ndarray:
    return np.concatenate([extractor(images[i : i + batch]) for i in range(0, len(images), batch)])


class _FidProbe:
    """Fixed real/fake evaluation sets so snapshot FIDs are comparable."""

    def __init__(self, cfg: GanConfig, reals: torch.Tensor, labels: torch.Tensor, extractor: FeatureExtractor):
        n = min(len(reals), cfg.fid_max_samples)
        gen = torch.Generator().manual_seed(step_seed(cfg.seed, -1, "fid"))
        idx = torch.randperm(len(reals), generator=gen)[:n]
        self.extractor = extractor
        self.labels = labels[idx]
        self.real_features = _features(extractor, reals[idx])
        self.seed = step_seed(cfg.seed, -2, "fid")

    def __call__(self, g: Generator) -> float:
        was_training = g.training
        g.eval()
        fakes = _sample(g, self.labels, self.seed)
        g.train(was_training)
        return fid_report(self.real_features, _features(self.extractor, fakes), self.extractor.descriptor).value


def _load_training_set(cfg: GanConfig, data: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor]:
    records = [r for r in data.records if r.split == "train"]
    if data.class_count != cfg.class_count:
        raise ManifestError(f"manifest has {data.class_count} classes, config expects {cfg.class_count}")
    counts = data.class_counts("train")
    empty = [data.class_names[c - 1] for c, n in counts.items() if n == 0]
    if empty:
        raise ManifestError(f"no training images for class(es): {', '.join(empty)}")
    images = load_tensor_batch(records, (cfg.resolution, cfg.resolution))
    labels = torch.tensor([r.class_id - 1 for r in records])
    return images, labels


def _snapshot(cfg, g, d, g_opt, d_opt, ada, images_seen, step, fid_log, pending) -> GanCheckpoint:
    clone = lambda sd: {k: (v.clone() if torch.is_tensor(v) else v) for k, v in sd.items()}
    import copy

    return GanCheckpoint(
        generator_state=clone(g.state_dict()),
        discriminator_state=clone(d.state_dict()),
        g_opt_state=copy.deepcopy(g_opt.state_dict()),
        d_opt_state=copy.deepcopy(d_opt.state_dict()),
        ada=replace(ada),
        kimg=images_seen / 1000.0,
        step=step,
        fid_log=list(fid_log),
        config=cfg.to_dict(),
        ada_pending=list(pending),
    )


def train_gan(
    cfg: GanConfig,
    data: DatasetManifest,
    fid_extractor: FeatureExtractor,
    resume: GanCheckpoint | None = None,
    checkpoint_dir: str | Path | None = None,
    on_snapshot: Callable[[GanCheckpoint], None] | None = None,
) -> list[GanCheckpoint]:
    """Train until ``cfg.total_kimg`` thousand real images have been shown.

    Returns the snapshots taken along the way; the last one is always the
    final state. FID is logged at kimg 0 for fresh runs, at every snapshot
    interval and at the end.
    """
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    reals, real_labels = _load_training_set(cfg, data)
    by_class = [torch.nonzero(real_labels == c).squeeze(1) for c in range(cfg.class_count)]
    probe = _FidProbe(cfg, reals, real_labels, fid_extractor)

    g, d = build_models(cfg)
    g_opt = torch.optim.Adam(g.parameters(), lr=cfg.g_lr, betas=cfg.betas)
    d_opt = torch.optim.Adam(d.parameters(), lr=cfg.d_lr, betas=cfg.betas)
    ada = AdaState()
    step, images_seen, fid_log, pending = 0, 0, [], []
    if resume is not None:
        g.load_state_dict(resume.generator_state)
        d.load_state_dict(resume.discriminator_state)
        g_opt.load_state_dict(resume.g_opt_state)
        d_opt.load_state_dict(resume.d_opt_state)
        ada = replace(resume.ada)
        step, images_seen = resume.step, resume.images_seen
        fid_log, pending = list(resume.fid_log), list(resume.ada_pending)

    snapshots: list[GanCheckpoint] = []

    def emit(force_fid: bool = True) -> GanCheckpoint:
        kimg = images_seen / 1000.0
        if force_fid and (not fid_log or fid_log[-1][0] < kimg):
            fid_log.append((kimg, probe(g)))
            logger.info("kimg %.3f  fid %.4f  p %.3f", kimg, fid_log[-1][1], ada.p)
        ckpt = _snapshot(cfg, g, d, g_opt, d_opt, ada, images_seen, step, fid_log, pending)
        snapshots.append(ckpt)
        if checkpoint_dir is not None:
            ckpt.save(Path(checkpoint_dir) / f"snapshot-{images_seen:09d}.pt")
            write_fid_log(fid_log, Path(checkpoint_dir) / "fid_log.tsv")
        if on_snapshot is not None:
            on_snapshot(ckpt)
        return ckpt

    if resume is None:
        emit()

    b = cfg.batch_size
    interval_steps = max(1, round(cfg.ada_interval_images / b))
    snap_every = cfg.snapshot_interval_kimg * 1000
    total = cfg.total_kimg * 1000
    next_snap = (math.floor(images_seen / snap_every) + 1) * snap_every if snap_every > 0 else math.inf

    g.train()
    d.train()
    while images_seen < total:
        gen = torch.Generator().manual_seed(step_seed(cfg.seed, step))
        labels = balanced_labels(b, cfg.class_count, step)
        pick = torch.stack(
            [by_class[int(c)][torch.randint(len(by_class[int(c)]), (1,), generator=gen)][0] for c in labels]
        )
        real = reals[pick]
        aug_seeds = torch.randint(0, 2**62, (4,), generator=gen).tolist()

        # discriminator
        z = torch.randn(b, cfg.latent_dim, generator=gen)
        with torch.no_grad():
            fake = g(z, labels)
        real_aug = augment_batch(real, ada.p, aug_seeds[0], cfg.ada_ops)
        fake_aug = augment_batch(fake, ada.p, aug_seeds[1], cfg.ada_ops)
        do_r1 = cfg.r1_gamma > 0 and step % cfg.r1_interval == 0
        if do_r1:
            real_aug = real_aug.detach().requires_grad_(True)
        real_logits = d(real_aug, labels)
        d_loss = F.softplus(d(fake_aug, labels)).mean() + F.softplus(-real_logits).mean()
        if do_r1:
            (grad,) = torch.autograd.grad(real_logits.sum(), real_aug, create_graph=True)
            d_loss = d_loss + 0.5 * cfg.r1_gamma * cfg.r1_interval * grad.pow(2).sum(dim=(1, 2, 3)).mean()
        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()
        pending.extend(torch.sign(real_logits.detach()).tolist())

        # generator
        z = torch.randn(b, cfg.latent_dim, generator=gen)
        fake_aug = augment_batch(g(z, labels), ada.p, aug_seeds[2], cfg.ada_ops)
        g_loss = F.softplus(-d(fake_aug, labels)).mean()
        g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        g_opt.step()

        step += 1
        images_seen += b
        if not (math.isfinite(d_loss.item()) and math.isfinite(g_loss.item())):
            ckpt = _snapshot(cfg, g, d, g_opt, d_opt, ada, images_seen, step, fid_log, pending)
            if checkpoint_dir is not None:
                ckpt.save(Path(checkpoint_dir) / "diverged.pt")
            raise GanTrainingError(
                f"non-finite loss at step {step} (d={d_loss.item()}, g={g_loss.item()})", ckpt
            )
        if step % interval_steps == 0:
            ada = ada_update(ada, pending, cfg)
            pending = []
        if images_seen >= next_snap and images_seen < total:
            emit()
            while next_snap <= images_seen:
                next_snap += snap_every

    emit()
    return snapshots


# ---------------------------------------------------------------------------
# sampling


def generate_per_class(
    g: Generator,
    per_class: int,
    cfg: GanConfig,
    out_dir: str | Path,
    seed: int,
    class_names: Sequence[str] | None = None,
) -> DatasetManifest:
    """Write ``per_class`` synthetic PNGs for every class and return their manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(class_names) if class_names is not None else [f"class_{i + 1:03d}" for i in range(cfg.class_count)]
    records: list[Record] = []
    g = g.eval()
    for c in range(cfg.class_count):
        if per_class <= 0:
            break
        labels = torch.full((per_class,), c, dtype=torch.long)
        imgs = _sample(g, labels, step_seed(seed, c, "generate"))
        arr = ((imgs.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
        for i, a in enumerate(arr):
            dst = write_image(a, out_dir / f"c{c + 1:03d}_{i:05d}.png")
            records.append(Record(image_ref=dst, class_id=c + 1, split="train", provenance="synthetic"))
    return DatasetManifest(
        records=records,
        class_count=cfg.class_count,
        class_names=names,
        resolution=(cfg.resolution, cfg.resolution),
        meta={"synthetic": {"per_class": per_class, "seed": seed}},
    )
