"""Per-pixel multivariate Gaussian fields and Mahalanobis distances.

Each grid position carries a sample mean and a regularized sample covariance
(denominator N-1, plus epsilon*I for invertibility). Cholesky factors are
computed once at fit time; distance evaluations only do triangular work.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FitError

DEFAULT_EPSILON = 0.01


@dataclass
class GaussianField:
    mean: np.ndarray  # (H, W, d) float64
    covariance: np.ndarray  # (H, W, d, d) float64, symmetric PD
    precision_chol: np.ndarray  # (H, W, d, d) lower Cholesky of covariance
    epsilon: float
    _chol_inv: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.mean.shape[0], self.mean.shape[1]

    @property
    def dim(self) -> int:
        return self.mean.shape[2]

    def chol_inv(self) -> np.ndarray:
        """Inverse of the lower Cholesky factor, cached for batched scoring."""
        if self._chol_inv is None:
            eye = np.eye(self.dim)
            inv = np.linalg.solve(self.precision_chol, eye)
            # the exact inverse is lower triangular; drop LU rounding noise above
            self._chol_inv = np.tril(inv)
        return self._chol_inv


def _cholesky_or_report(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        for h in range(cov.shape[0]):
            for w in range(cov.shape[1]):
                try:
                    np.linalg.cholesky(cov[h, w])
                except np.linalg.LinAlgError:
                    raise FitError(
                        f"covariance at pixel ({h},{w}) is not positive definite "
                        "even after regularization"
                    ) from None
        raise FitError("covariance stack is not positive definite") from None


def field_from_moments(
    mean: np.ndarray, covariance: np.ndarray, epsilon: float
) -> GaussianField:
    """Build a field from precomputed moments, factorizing the covariances."""
    chol = _cholesky_or_report(covariance)
    return GaussianField(mean, covariance, chol, float(epsilon))


def fit_pixel_gaussians(
    train_features: Sequence[np.ndarray], epsilon: float = DEFAULT_EPSILON
) -> GaussianField:
    """Fit the plain per-pixel Gaussian field from N nominal feature maps.

    mean = (1/N) sum_i e_i, covariance = (1/(N-1)) sum_i (e_i-mean)(e_i-mean)^T
    plus epsilon*I. Accumulation is in float64 whatever the storage dtype.
    """
    n = len(train_features)
    if n < 2:
        raise FitError(f"need at least 2 feature maps to fit a covariance, got {n}")
    if epsilon <= 0:
        raise FitError(f"epsilon must be positive, got {epsilon}")
    shape = train_features[0].shape
    for fm in train_features:
        if fm.shape != shape:
            raise FitError(f"feature map shapes differ: {fm.shape} vs {shape}")
    stack = np.stack([np.asarray(fm, dtype=np.float64) for fm in train_features])
    mean = stack.mean(axis=0)
    diff = stack - mean
    cov = np.einsum("nhwi,nhwj->hwij", diff, diff, optimize=True) / (n - 1)
    d = shape[2]
    cov[..., np.arange(d), np.arange(d)] += epsilon
    return field_from_moments(mean, cov, epsilon)


def mahalanobis(x: np.ndarray, gfield: GaussianField, h: int, w: int) -> float:
    """sqrt((x-mu)^T Sigma^-1 (x-mu)) at one pixel, via a triangular solve."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FitError("mahalanobis input vector must be finite")
    diff = x - gfield.mean[h, w]
    y = solve_triangular(gfield.precision_chol[h, w], diff, lower=True)
    return float(np.sqrt(y @ y))


def mahalanobis_grid(vectors: np.ndarray, gfield: GaussianField) -> np.ndarray:
    """Per-pixel Mahalanobis distance of a (H, W, d) stack to its own pixel."""
    diff = np.asarray(vectors, dtype=np.float64) - gfield.mean
    y = np.einsum("hwij,hwj->hwi", gfield.chol_inv(), diff, optimize=True)
    return np.sqrt(np.einsum("hwi,hwi->hw", y, y))
