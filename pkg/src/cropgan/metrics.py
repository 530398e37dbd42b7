"""Feature statistics, Frechet distance and classification accuracy.

FID between two feature sets with Gaussian fits (mu_x, S_x) and (mu_g, S_g)::

    d^2 = ||mu_x - mu_g||^2 + Tr(S_x + S_g - 2 (S_x S_g)^(1/2))

The cross term is evaluated through the symmetric product
``sqrt(S_x) S_g sqrt(S_x)``, which has the same trace but is PSD, so only
symmetric eigendecompositions are needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

__all__ = [
    "GaussianStats",
    "FeatureExtractor",
    "IdentityExtractor",
    "RandomProjectionExtractor",
    "FidReport",
    "gaussian_stats",
    "sqrtm_psd",
    "fid",
    "fid_report",
    "accuracy",
]

SYMMETRY_TOL = 1e-8
EIG_REL_EPS = 1e-6
SHRINKAGE_REL = 1e-6


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int
    shrinkage: float = 0.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise ValueError(
                f"mean of shape {self.mu.shape} does not match covariance {self.sigma.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mu.size


def gaussian_stats(features, shrink: bool = True) -> GaussianStats:
    """Sample mean and unbiased covariance of a set of feature vectors.

    When there are fewer samples than dimensions the covariance is singular;
    ``lambda * I`` with ``lambda = 1e-6 * mean(diag)`` is then added and
    recorded in ``shrinkage``.
    """
    if isinstance(features, np.ndarray):
        x = features.astype(np.float64, copy=False)
        if x.ndim != 2:
            raise ValueError(f"expected a 2-D feature array, got shape {x.shape}")
    else:
        rows = [np.asarray(f, dtype=np.float64).ravel() for f in features]
        if rows and len({r.size for r in rows}) != 1:
            raise ValueError("feature vectors have mismatched dimensions")
        x = np.stack(rows) if rows else np.empty((0, 0))
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 feature vectors, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    lam = 0.0
    if shrink and n < d:
        lam = SHRINKAGE_REL * float(np.mean(np.diag(sigma)))
        sigma = sigma + lam * np.eye(d)
    return GaussianStats(mu=mu, sigma=sigma, n=n, shrinkage=lam)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix.

    Eigenvalues in ``[-eps, 0)`` with ``eps = 1e-6 * max|eigenvalue|`` are
    treated as round-off and clamped to zero; anything more negative raises.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(float(np.max(np.abs(a))), 1e-300)
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    top = float(np.max(np.abs(w))) if w.size else 0.0
    eps = EIG_REL_EPS * top
    if w.size and w.min() < -eps:
        raise ValueError(
            f"matrix is indefinite: eigenvalue {w.min():.3e} below -{eps:.3e}"
        )
    root = np.sqrt(np.clip(w, 0.0, None))
    s = (v * root) @ v.T
    return 0.5 * (s + s.T)


def _fid_value(x: GaussianStats, g: GaussianStats) -> tuple[float, float]:
    if x.dim != g.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {g.dim}")
    diff = x.mu - g.mu
    root_x = sqrtm_psd(x.sigma)
    inner = root_x @ g.sigma @ root_x
    cross = np.trace(sqrtm_psd(0.5 * (inner + inner.T)))
    raw = float(diff @ diff + np.trace(x.sigma) + np.trace(g.sigma) - 2.0 * cross)
    if raw < 0.0:
        logger.warning("FID round-off: clamped %.3e to 0", raw)
        return 0.0, raw
    return raw, 0.0


def fid(x: GaussianStats, g: GaussianStats) -> float:
    """Frechet distance between two Gaussian fits."""
    return _fid_value(x, g)[0]


class FeatureExtractor(Protocol):
    """Maps a batch of images ``(N, 3, H, W)`` in [-1, 1] to ``(N, D)`` features."""

    descriptor: str
    dim: int

    def __call__(self, images: torch.Tensor) -> np.ndarray: ...


class IdentityExtractor:
    """Flattens inputs; for low-dimensional synthetic data."""

    def __init__(self, dim: int):
        self.dim = dim
        self.descriptor = f"identity-d{dim}"

    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(images).reshape(len(images), -1)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} features, got {x.shape[1]}")
        return x.double().numpy()


class RandomProjectionExtractor:
    """Fixed random projection of average-pooled pixels.

    Images are pooled to ``pool x pool``, flattened and multiplied by a
    Gaussian matrix drawn once from ``seed``. Cheap, deterministic, and only
    comparable with itself, hence the descriptor.
    """

    def __init__(self, dim: int = 64, pool: int = 8, seed: int = 0):
        self.dim = dim
        self.pool = pool
        self.seed = seed
        self.descriptor = f"randproj-pool{pool}-d{dim}-seed{seed}"
        gen = torch.Generator().manual_seed(seed)
        fan_in = 3 * pool * pool
        self._proj = torch.randn(fan_in, dim, generator=gen, dtype=torch.float64) / fan_in**0.5

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        images = torch.as_tensor(images, dtype=torch.float32)
        pooled = F.adaptive_avg_pool2d(images, self.pool).reshape(len(images), -1)
        return (pooled.double() @ self._proj).numpy()


@dataclass
class FidReport:
    value: float
    extractor: str
    n_real: int
    n_fake: int
    shrinkage_real: float = 0.0
    shrinkage_fake: float = 0.0
    clamped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metric": "fid",
            "value": self.value,
            "extractor": self.extractor,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "shrinkage_real": self.shrinkage_real,
            "shrinkage_fake": self.shrinkage_fake,
            "clamped": list(self.clamped),
        }


def fid_report(real_features: np.ndarray, fake_features: np.ndarray, extractor: str) -> FidReport:
    sx = gaussian_stats(real_features)
    sg = gaussian_stats(fake_features)
    value, clamped = _fid_value(sx, sg)
    return FidReport(
        value=value,
        extractor=extractor,
        n_real=sx.n,
        n_fake=sg.n,
        shrinkage_real=sx.shrinkage,
        shrinkage_fake=sg.shrinkage,
        clamped=[clamped] if clamped else [],
    )


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of predictions equal to their label."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    if not labels:
        raise ValueError("accuracy of an empty set is undefined")
    hits = sum(int(p) == int(t) for p, t in zip(predictions, labels))
    return hits / len(labels)
