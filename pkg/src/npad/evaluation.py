"""Evaluation metrics: AUROC, PRO-score, map upsampling, components.

AUROC is the rank-based Mann-Whitney statistic with midranks for ties.
The PRO-score integrates the mean per-component overlap against the global
false positive rate up to a cap (default 0.3) and normalizes by the cap.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ConfigError

PRO_FPR_CAP = 0.3
PRO_THRESHOLDS = 200

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def upsample_map(amap: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling of an anomaly map.

    Output corners sample the input corners exactly, so constant maps stay
    constant and values never leave [min, max] of the input.
    """
    amap = np.asarray(amap, dtype=np.float64)
    in_h, in_w = amap.shape
    if out_h < in_h or out_w < in_w:
        raise ConfigError(
            f"upsample target {out_h}x{out_w} smaller than input {in_h}x{in_w}"
        )

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.int64), np.zeros(n_out)
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        base = np.minimum(src.astype(np.int64), n_in - 2)
        return base, src - base

    row_base, row_frac = axis_coords(in_h, out_h)
    col_base, col_frac = axis_coords(in_w, out_w)
    if in_h == 1:
        rows0 = rows1 = amap[0:1, :].repeat(out_h, axis=0)
    else:
        rows0 = amap[row_base]
        rows1 = amap[row_base + 1]
    interp_rows = rows0 * (1 - row_frac)[:, None] + rows1 * row_frac[:, None]
    if in_w == 1:
        cols0 = cols1 = interp_rows[:, 0:1].repeat(out_w, axis=1)
    else:
        cols0 = interp_rows[:, col_base]
        cols1 = interp_rows[:, col_base + 1]
    return cols0 * (1 - col_frac)[None, :] + cols1 * col_frac[None, :]


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve, ties counted half.

    Equals the probability that a random positive outscores a random
    negative, via the Mann-Whitney rank statistic.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ConfigError("scores and labels must have the same length")
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUROC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connectivity labeling; labels are assigned in first-seen row-major
    order starting at 1, background stays 0."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ConfigError("mask values must be 0/1")
    raw, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return raw.astype(np.int64), 0
    flat = raw.ravel()
    nonzero = flat[flat > 0]
    _, first_pos = np.unique(nonzero, return_index=True)
    order = np.argsort(first_pos, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int64)
    remap[np.arange(1, n + 1)[order]] = np.arange(1, n + 1)
    return remap[raw], n


def roc_curve_points(
    scores: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (descending) with their FPR and TPR, anchored at (0,0)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    thresholds = np.unique(scores)[::-1]
    pos_scores = np.sort(scores[labels == 1])
    neg_scores = np.sort(scores[labels == 0])
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append(1.0 - np.searchsorted(pos_scores, t, side="left") / len(pos_scores))
        fpr.append(1.0 - np.searchsorted(neg_scores, t, side="left") / len(neg_scores))
    return np.concatenate(([np.inf], thresholds)), np.array(fpr), np.array(tpr)


def pro_curve(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    n_thresholds: int = PRO_THRESHOLDS,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-component overlap and global FPR per threshold.

    Thresholds are evenly spaced quantiles of the pooled score distribution,
    walked from the highest down; the curve is anchored at (0, 0).
    """
    if len(maps) != len(masks) or len(maps) == 0:
        raise ConfigError("need matching, non-empty map and mask sequences")
    component_scores: list[np.ndarray] = []
    nominal_scores: list[np.ndarray] = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask)
        if amap.shape != mask.shape:
            raise ConfigError(
                f"map {amap.shape} and mask {mask.shape} disagree on resolution"
            )
        labeled, n = connected_components(mask)
        for comp in range(1, n + 1):
            component_scores.append(np.sort(amap[labeled == comp]))
        nominal_scores.append(amap[mask == 0])
    if not component_scores:
        raise ConfigError("PRO-score needs at least one anomalous component")

    pooled = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    thresholds = np.quantile(pooled, np.linspace(0.0, 1.0, n_thresholds))[::-1]
    nominal = np.sort(np.concatenate(nominal_scores))
    total_nominal = nominal.size
    if total_nominal == 0:
        raise ConfigError("PRO-score needs nominal pixels for the FPR")

    fprs = [0.0]
    overlaps = [0.0]
    for t in thresholds:
        hits = [
            (comp.size - np.searchsorted(comp, t, side="left")) / comp.size
            for comp in component_scores
        ]
        overlaps.append(float(np.mean(hits)))
        false_pos = total_nominal - np.searchsorted(nominal, t, side="left")
        fprs.append(false_pos / total_nominal)
    return np.array(fprs), np.array(overlaps)


def pro_score(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_cap: float = PRO_FPR_CAP,
    n_thresholds: int = PRO_THRESHOLDS,
) -> float:
    """Normalized area under the per-region-overlap curve up to fpr_cap."""
    if not 0.0 < fpr_cap <= 1.0:
        raise ConfigError(f"fpr_cap must be in (0, 1], got {fpr_cap}")
    fprs, overlaps = pro_curve(maps, masks, n_thresholds)
    area = 0.0
    for i in range(1, len(fprs)):
        f0, f1 = fprs[i - 1], fprs[i]
        o0, o1 = overlaps[i - 1], overlaps[i]
        if f1 <= fpr_cap:
            area += 0.5 * (o0 + o1) * (f1 - f0)
        elif f0 < fpr_cap:
            # linear cut at the cap
            frac = (fpr_cap - f0) / (f1 - f0)
            o_cap = o0 + frac * (o1 - o0)
            area += 0.5 * (o0 + o_cap) * (fpr_cap - f0)
        else:
            break
    return float(area / fpr_cap)
