"""Neighborhood feature aggregation and the k-means centroid bank.

Aggregation is a clipped box mean over the size-p window (adaptive average
pooling). The bank clusters pooled nominal features with seeded k-means++
plus Lloyd iterations and keeps the cluster means as the reference set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, FitError
from .gaussian_field import GaussianField, fit_pixel_gaussians
from .neighbor_sim import shifted_slices, window_offsets

MAX_POOL_POINTS = 100_000
LLOYD_MAX_ITER = 100
LLOYD_REL_TOL = 1e-4


def aggregate_features(fm: np.ndarray, p: int) -> np.ndarray:
    """Mean feature vector over each pixel's clipped size-p window."""
    fm = np.asarray(fm, dtype=np.float64)
    height, width = fm.shape[:2]
    acc = np.zeros_like(fm)
    count = np.zeros((height, width))
    for off in window_offsets(p):
        target, source = shifted_slices(off, height, width)
        acc[target] += fm[source]
        count[target[0], target[1]] += 1.0
    return acc / count[..., None]


def fit_aggregate_field(
    train_features: Sequence[np.ndarray], p: int, epsilon: float
) -> GaussianField:
    """Aggregate every training map, then fit the per-pixel Gaussian field."""
    return fit_pixel_gaussians(
        [aggregate_features(fm, p) for fm in train_features], epsilon
    )


@dataclass
class CentroidBank:
    centroids: np.ndarray  # (K, d) float64
    ratio: float
    seed: int
    inertia: float

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[rng.integers(n)]
            continue
        idx = rng.choice(n, p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


_ASSIGN_CHUNK = 4096


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # squared distances via the expansion; argmin ties go to the lower index;
    # chunked over points to bound the n x k distance block
    c2 = np.einsum("kd,kd->k", centroids, centroids)
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n)
    for start in range(0, n, _ASSIGN_CHUNK):
        block = points[start : start + _ASSIGN_CHUNK]
        d2 = c2[None, :] - 2.0 * block @ centroids.T
        idx = np.argmin(d2, axis=1)
        labels[start : start + _ASSIGN_CHUNK] = idx
        p2 = np.einsum("nd,nd->n", block, block)
        best[start : start + _ASSIGN_CHUNK] = np.maximum(
            d2[np.arange(block.shape[0]), idx] + p2, 0.0
        )
    return labels, best


def build_centroid_bank(
    train_features_aggregated: Sequence[np.ndarray],
    ratio: float,
    seed: int,
    max_points: int = MAX_POOL_POINTS,
    medoid: bool = False,
) -> CentroidBank:
    """Cluster the pooled aggregated features and keep the cluster means.

    The pool spans every pixel of every training map; it is uniformly
    subsampled to max_points before clustering when larger. K is
    ceil(ratio * pool size), at least 1. With medoid=True each centroid is
    snapped to its nearest real pool member afterwards.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"centroid ratio must be in (0, 1], got {ratio}")
    if len(train_features_aggregated) == 0:
        raise FitError("empty feature pool for the centroid bank")
    pool = np.concatenate(
        [
            np.asarray(fm, dtype=np.float64).reshape(-1, fm.shape[2])
            for fm in train_features_aggregated
        ]
    )
    if pool.size == 0:
        raise FitError("empty feature pool for the centroid bank")
    rng = np.random.default_rng(seed)
    if pool.shape[0] > max_points:
        keep = np.sort(rng.choice(pool.shape[0], size=max_points, replace=False))
        pool = pool[keep]

    k = max(1, int(np.ceil(ratio * pool.shape[0])))
    centroids = _kmeans_pp_init(pool, k, rng)

    prev_inertia = np.inf
    for _ in range(LLOYD_MAX_ITER):
        labels, best = _assign(pool, centroids)
        inertia = float(best.sum())
        if inertia > prev_inertia * (1.0 + 1e-9) + 1e-12:
            raise FitError("k-means inertia increased between iterations")
        prev_inertia = inertia

        counts = np.bincount(labels, minlength=k)
        new_centroids = np.zeros_like(centroids)
        for dim in range(pool.shape[1]):
            new_centroids[:, dim] = np.bincount(
                labels, weights=pool[:, dim], minlength=k
            )
        nonempty = counts > 0
        new_centroids[nonempty] /= counts[nonempty, None]
        # empty clusters grab the points currently farthest from their centroid
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            far_order = np.argsort(-best, kind="stable")
            for j, point_idx in zip(empties, far_order):
                new_centroids[j] = pool[point_idx]

        shift = np.linalg.norm(new_centroids - centroids)
        scale = max(np.linalg.norm(centroids), 1e-12)
        centroids = new_centroids
        if shift / scale < LLOYD_REL_TOL:
            break

    if medoid:
        snapped = np.empty_like(centroids)
        for j in range(k):
            d2 = np.sum((pool - centroids[j]) ** 2, axis=1)
            snapped[j] = pool[int(np.argmin(d2))]
        centroids = snapped
    _, best = _assign(pool, centroids)
    return CentroidBank(centroids, float(ratio), int(seed), float(best.sum()))


def nearest_centroid_distance(v: np.ndarray, bank: CentroidBank) -> float:
    """Exact minimum Euclidean distance from v to the bank."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FitError("query vector must be finite")
    c2 = np.einsum("kd,kd->k", bank.centroids, bank.centroids)
    scores = c2 - 2.0 * bank.centroids @ v
    idx = int(np.argmin(scores))
    return float(np.sqrt(np.sum((v - bank.centroids[idx]) ** 2)))
