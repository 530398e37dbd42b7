from __future__ import annotations

import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cropgan.metrics import (
    GaussianStats,
    IdentityExtractor,
    RandomProjectionExtractor,
    accuracy,
    fid,
    fid_report,
    gaussian_stats,
    sqrtm_psd,
)


def _two_pass_covariance(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference mean/covariance with explicit loops."""
    n, d = x.shape
    mu = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(n)) / (n - 1)
    return np.array(mu), cov


def _commuting_pair(rng, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    a, b = rng.uniform(0.1, 4.0, d), rng.uniform(0.1, 4.0, d)
    mx, mg = rng.normal(size=d), rng.normal(size=d)
    expected = float(np.sum((mx - mg) ** 2) + np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
    sx, sg = (q * a) @ q.T, (q * b) @ q.T
    return GaussianStats(mx, 0.5 * (sx + sx.T), 100), GaussianStats(mg, 0.5 * (sg + sg.T), 100), expected


# -- statistics ----------------------------------------------------------------


@pytest.mark.parametrize("n,d", [(12, 3), (40, 5), (7, 2)])
def test_gaussian_stats_matches_two_pass_oracle(n, d):
    x = np.random.default_rng(n).normal(size=(n, d)) * 3 + 10
    mu, cov = _two_pass_covariance(x)
    s = gaussian_stats(x)
    np.testing.assert_allclose(s.mu, mu, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.sigma, cov, rtol=0, atol=1e-12)
    assert s.n == n and s.shrinkage == 0.0


def test_gaussian_stats_shrinks_when_undersampled():
    x = np.random.default_rng(0).normal(size=(4, 10))
    s = gaussian_stats(x)
    _, cov = _two_pass_covariance(x)
    lam = 1e-6 * np.mean(np.diag(cov))
    assert s.shrinkage == pytest.approx(lam, rel=1e-12)
    np.testing.assert_allclose(s.sigma, cov + lam * np.eye(10), atol=1e-12)
    assert np.linalg.eigvalsh(s.sigma).min() > 0
    assert gaussian_stats(x, shrink=False).shrinkage == 0.0


def test_gaussian_stats_input_errors():
    with pytest.raises(ValueError):
        gaussian_stats(np.zeros((1, 3)))
    with pytest.raises(ValueError, match="mismatched"):
        gaussian_stats([np.zeros(3), np.zeros(4)])
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(3), np.eye(2), 5)


# -- matrix square root -----------------------------------------------------------


def test_sqrtm_diagonal_exact():
    np.testing.assert_allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), rtol=0, atol=1e-12)


@pytest.mark.parametrize("d", [1, 5, 32, 128])
def test_sqrtm_reconstructs(d):
    b = np.random.default_rng(d).normal(size=(d, d + 3))
    a = b @ b.T
    s = sqrtm_psd(a)
    assert np.linalg.norm(s @ s - a) / np.linalg.norm(a) < 1e-8
    np.testing.assert_allclose(s, s.T, atol=0)


def test_sqrtm_clamps_round_off_and_rejects_indefinite():
    s = sqrtm_psd(np.diag([1.0, -1e-9, 0.0]))
    np.testing.assert_allclose(s, np.diag([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError, match="indefinite"):
        sqrtm_psd(np.diag([1.0, -1e-3]))
    with pytest.raises(ValueError, match="symmetric"):
        sqrtm_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        sqrtm_psd(np.zeros((2, 3)))


# -- FID ----------------------------------------------------------------------


def test_fid_unit_mean_shift():
    d = 6
    x = GaussianStats(np.zeros(d), np.eye(d), 10)
    g = GaussianStats(np.eye(d)[0], np.eye(d), 10)
    assert fid(x, g) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 12))
def test_fid_commuting_closed_form_and_symmetry(seed, d):
    x, g, expected = _commuting_pair(np.random.default_rng(seed), d)
    assert abs(fid(x, g) - expected) <= 1e-8 * max(1.0, expected)
    assert abs(fid(x, g) - fid(g, x)) <= 1e-9 * max(1.0, expected)
    assert abs(fid(x, x)) <= 1e-9


def test_fid_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        fid(GaussianStats(np.zeros(2), np.eye(2), 3), GaussianStats(np.zeros(3), np.eye(3), 3))


def test_fid_report_logs_clamping(caplog, monkeypatch):
    feats = np.random.default_rng(0).normal(size=(50, 4))
    rep = fid_report(feats, feats, "identity-d4")
    assert rep.value >= 0.0
    assert rep.to_dict()["extractor"] == "identity-d4"
    assert rep.to_dict()["n_real"] == 50

    import cropgan.metrics as metrics

    monkeypatch.setattr(metrics, "sqrtm_psd", lambda a: 2.0 * np.linalg.cholesky(a + np.eye(len(a))))
    with caplog.at_level(logging.WARNING, logger="cropgan.metrics"):
        rep = fid_report(feats, feats, "identity-d4")
    assert rep.value == 0.0
    assert rep.clamped and rep.clamped[0] < 0
    assert "clamped" in caplog.text


# -- extractors and accuracy -------------------------------------------------------


def test_random_projection_extractor_is_deterministic():
    imgs = torch.rand(5, 3, 32, 32) * 2 - 1
    a, b = RandomProjectionExtractor(), RandomProjectionExtractor()
    assert a.descriptor == "randproj-pool8-d64-seed0"
    np.testing.assert_array_equal(a(imgs), b(imgs))
    assert a(imgs).shape == (5, 64)
    assert not np.array_equal(a(imgs), RandomProjectionExtractor(seed=1)(imgs))


def test_identity_extractor_checks_width():
    ext = IdentityExtractor(6)
    assert ext(torch.zeros(2, 6)).shape == (2, 6)
    with pytest.raises(ValueError):
        ext(torch.zeros(2, 5))


def test_accuracy():
    assert accuracy([1, 2, 3, 3], [1, 2, 2, 3]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])
