"""Evaluation metrics: Fréchet distance between embedding sets, Spearman rank
correlation with a permutation p-value, 1-D earth mover's distance, and
cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, norm, rankdata

from .mathcore import ShapeError, sym_matrix_sqrt

RIDGE = 1e-6


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int


def fit_gaussian(samples, ridge: float = RIDGE) -> GaussianStats:
    """Sample mean and unbiased covariance plus ``ridge * I``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("samples must be a list of equal-length vectors")
    if len(x) < 2:
        raise ValueError("need at least 2 samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(x.shape[1])
    return GaussianStats(mean, cov, len(x))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``, clamped at 0."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.covariance, b.covariance):
        return 0.0
    diff = a.mean - b.mean
    root_a = sym_matrix_sqrt(a.covariance)
    inner = root_a @ b.covariance @ root_a
    cross = sym_matrix_sqrt(0.5 * (inner + inner.T))
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fad_score(background, generated) -> float:
    """Fréchet distance between Gaussians fitted to two embedding sets."""
    return frechet_distance(fit_gaussian(background), fit_gaussian(generated))


def spearman_srcc(x, y, n_permutations: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Spearman's rho with average ranks for ties and a two-sided permutation p-value.

    ``p = (1 + #{|rho_perm| >= |rho|}) / (1 + n_permutations)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("x and y must be 1-D and of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 observations")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        raise ValueError("Spearman correlation undefined for constant input")
    rho = float(np.sum(rx * ry) / denom)
    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.broadcast_to(ry, (n_permutations, len(ry))), axis=1)
    rho_perm = perms @ rx / denom
    # tolerance keeps exact ties (e.g. the identity permutation) counted
    hits = np.count_nonzero(np.abs(rho_perm) >= abs(rho) - 1e-12)
    return rho, (1.0 + hits) / (1.0 + n_permutations)


def emd_1d(a, b) -> float:
    """Earth mover's distance between two 1-D empirical distributions.

    Integrates ``|F_a - F_b|`` over the merged support.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("emd_1d needs non-empty inputs")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    widths = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def cosine_similarity(a, b) -> float:
    a = np.ravel(getattr(a, "values", a)).astype(np.float64)
    b = np.ravel(getattr(b, "values", b)).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two ``(n, d)`` arrays."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity undefined for a zero vector")
    return np.clip(np.sum(a * b, axis=-1) / (na * nb), -1.0, 1.0)


def gaussian_ball_radius(k_sigma: float, d: int) -> float:
    """Radius, in units of the per-coordinate std, of the isotropic ``d``-dim
    Gaussian ball holding the same mass as ``±k_sigma`` in one dimension."""
    mass = norm.cdf(k_sigma) - norm.cdf(-k_sigma)
    return float(np.sqrt(chi2.ppf(mass, d)))
