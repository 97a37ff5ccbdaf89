"""Neighborhood windows, Bhattacharyya similarity, and the weighted field.

The per-pixel window has radius floor(p/2) and clips at the grid border; no
padding is invented, weights simply renormalize over the surviving members.
Similarity weights come from the plain per-pixel field in a single pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, FitError
from .gaussian_field import GaussianField, field_from_moments

WEIGHT_SCHEMES = ("similarity", "uniform", "random")


def window_offsets(p: int) -> list[tuple[int, int]]:
    """Row-major (dh, dw) offsets of the size-p window, radius floor(p/2)."""
    if p < 1:
        raise ConfigError(f"neighborhood size must be >= 1, got {p}")
    r = p // 2
    return [(dh, dw) for dh in range(-r, r + 1) for dw in range(-r, r + 1)]


@dataclass(frozen=True)
class Neighborhood:
    center: tuple[int, int]
    radius: int
    members: tuple[tuple[int, int], ...]


def neighborhood(h: int, w: int, p: int, height: int, width: int) -> Neighborhood:
    """Grid positions within radius floor(p/2) of (h, w), clipped, row-major."""
    if not (0 <= h < height and 0 <= w < width):
        raise ConfigError(f"pixel ({h},{w}) outside {height}x{width} grid")
    members = tuple(
        (h + dh, w + dw)
        for dh, dw in window_offsets(p)
        if 0 <= h + dh < height and 0 <= w + dw < width
    )
    return Neighborhood((h, w), p // 2, members)


def shifted_slices(
    offset: tuple[int, int], height: int, width: int
) -> tuple[tuple[slice, slice], tuple[slice, slice]]:
    """Target and source slices so source = target + offset stays in-grid."""
    dh, dw = offset
    target = (
        slice(max(0, -dh), min(height, height - dh)),
        slice(max(0, -dw), min(width, width - dw)),
    )
    source = (
        slice(max(0, dh), min(height, height + dh)),
        slice(max(0, dw), min(width, width + dw)),
    )
    return target, source


def bhattacharyya_bc(
    mu1: np.ndarray,
    cov1: np.ndarray,
    mu2: np.ndarray,
    cov2: np.ndarray,
    simplified: bool = True,
) -> float:
    """Bhattacharyya coefficient between two Gaussians.

    Simplified form: (1/8) (mu1-mu2)^T Sigma'^-1 (mu1-mu2) with
    Sigma' = (cov1+cov2)/2. The full form adds
    (1/2) log(det Sigma' / sqrt(det cov1 * det cov2)).
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    avg = 0.5 * (cov1 + cov2)
    try:
        chol = np.linalg.cholesky(avg)
    except np.linalg.LinAlgError:
        raise FitError("averaged covariance is singular") from None
    y = solve_triangular(chol, mu1 - mu2, lower=True)
    bc = 0.125 * float(y @ y)
    if not simplified:
        logdet_avg = 2.0 * float(np.sum(np.log(np.diag(chol))))
        logdet_1 = float(np.linalg.slogdet(cov1)[1])
        logdet_2 = float(np.linalg.slogdet(cov2)[1])
        bc += 0.5 * (logdet_avg - 0.5 * (logdet_1 + logdet_2))
    return bc


def similarity_weight(bc: float, gamma: float) -> float:
    """exp(-bc/gamma); gamma balances how much the neighborhood contributes."""
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if bc < 0:
        raise ConfigError(f"Bhattacharyya coefficient must be >= 0, got {bc}")
    return float(np.exp(-bc / gamma))


@dataclass
class WeightField:
    """Normalized per-pixel member weights over the size-p window.

    weights has shape (H, W, K) with K = window size; entries for members
    clipped at the border are zero and per-pixel weights sum to 1.
    """

    p: int
    offsets: list[tuple[int, int]]
    weights: np.ndarray

    def members_at(self, h: int, w: int) -> list[tuple[tuple[int, int], float]]:
        height, width = self.weights.shape[:2]
        out = []
        for k, (dh, dw) in enumerate(self.offsets):
            hh, ww = h + dh, w + dw
            if 0 <= hh < height and 0 <= ww < width:
                out.append(((hh, ww), float(self.weights[h, w, k])))
        return out

    def to_jsonable(self) -> dict:
        return {
            "p": self.p,
            "offsets": [list(o) for o in self.offsets],
            "weights": self.weights.tolist(),
        }


def _pairwise_bc_grid(
    base: GaussianField, offset: tuple[int, int], simplified: bool
) -> np.ndarray:
    """BC between each pixel's Gaussian and its neighbor at offset, batched."""
    height, width = base.grid_hw
    target, source = shifted_slices(offset, height, width)
    mu_t = base.mean[target]
    mu_s = base.mean[source]
    avg = 0.5 * (base.covariance[target] + base.covariance[source])
    delta = mu_t - mu_s
    solved = np.linalg.solve(avg, delta[..., None])[..., 0]
    bc = 0.125 * np.einsum("hwi,hwi->hw", delta, solved)
    if not simplified:
        chol = np.linalg.cholesky(avg)
        logdet_avg = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
        diag_t = np.diagonal(base.precision_chol[target], axis1=-2, axis2=-1)
        diag_s = np.diagonal(base.precision_chol[source], axis1=-2, axis2=-1)
        logdet_t = 2.0 * np.log(diag_t).sum(axis=-1)
        logdet_s = 2.0 * np.log(diag_s).sum(axis=-1)
        bc = bc + 0.5 * (logdet_avg - 0.5 * (logdet_t + logdet_s))
    return bc


def compute_weight_field(
    base: GaussianField,
    p: int,
    gamma: float,
    simplified: bool = True,
    scheme: str = "similarity",
    rng: np.random.Generator | None = None,
) -> WeightField:
    """Per-pixel normalized member weights from base-field similarities.

    scheme 'uniform' forces 1/|window| weights and 'random' draws seeded
    positive weights; both exist for the sampling-method comparison.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if scheme not in WEIGHT_SCHEMES:
        raise ConfigError(f"unknown weight scheme {scheme!r}")
    if scheme == "random" and rng is None:
        raise ConfigError("random weight scheme needs a seeded generator")
    height, width = base.grid_hw
    offsets = window_offsets(p)
    raw = np.zeros((height, width, len(offsets)))
    for k, off in enumerate(offsets):
        target, _ = shifted_slices(off, height, width)
        if off == (0, 0):
            raw[:, :, k] = 1.0  # self-similarity: BC = 0, weight exactly 1
        elif scheme == "similarity":
            bc = _pairwise_bc_grid(base, off, simplified)
            raw[target[0], target[1], k] = np.exp(-bc / gamma)
        elif scheme == "uniform":
            raw[target[0], target[1], k] = 1.0
        else:
            raw[target[0], target[1], k] = rng.uniform(0.1, 1.0, size=raw[target].shape[:2])
    total = raw.sum(axis=2, keepdims=True)
    return WeightField(p, offsets, raw / total)


def fit_weighted_field(
    train_features: Sequence[np.ndarray],
    base: GaussianField,
    p: int,
    gamma: float,
    epsilon: float,
    simplified: bool = True,
    scheme: str = "similarity",
    rng: np.random.Generator | None = None,
) -> tuple[WeightField, GaussianField]:
    """Fit the similarity-weighted mean and covariance at every pixel.

    Weighted mean: (1/N) sum_i sum_a m'_a e_i^a. Weighted covariance divides
    by N - sum_a (m'_a)^2 and is regularized with epsilon*I like the plain
    field before factorization.
    """
    n = len(train_features)
    if n < 1:
        raise FitError("no training features")
    height, width = base.grid_hw
    stack = np.stack([np.asarray(fm, dtype=np.float64) for fm in train_features])
    if stack.shape[1:3] != (height, width) or stack.shape[3] != base.dim:
        raise FitError("training features do not match the base field grid")

    wfield = compute_weight_field(base, p, gamma, simplified, scheme, rng)
    weights = wfield.weights

    denom = n - (weights**2).sum(axis=2)
    if np.min(denom) <= 0:
        raise FitError(
            "weighted covariance denominator N - sum(m'^2) is not positive; "
            "fit on more nominal images (N >= 2)"
        )

    d = base.dim
    mean = np.zeros((height, width, d))
    for k, off in enumerate(wfield.offsets):
        target, source = shifted_slices(off, height, width)
        w_k = weights[target[0], target[1], k]
        mean[target] += w_k[..., None] * (stack[:, source[0], source[1]].sum(axis=0) / n)

    cov = np.zeros((height, width, d, d))
    for k, off in enumerate(wfield.offsets):
        target, source = shifted_slices(off, height, width)
        diff = stack[:, source[0], source[1]] - mean[target]
        w_k = weights[target[0], target[1], k]
        cov[target] += w_k[..., None, None] * np.einsum(
            "nhwi,nhwj->hwij", diff, diff, optimize=True
        )
    cov /= denom[..., None, None]
    cov[..., np.arange(d), np.arange(d)] += epsilon
    return wfield, field_from_moments(mean, cov, epsilon)
