"""Anomaly map and image score computation, plus model bundle persistence.

The pixel map is the geometric mean of two Mahalanobis maps: the minimum
distance to the weighted distributions in the inference window, and the
distance of the aggregated feature to the aggregated-field distribution.
The image score pairs the top-k pixel distances with nearest-centroid
distances, both sorted ascending, and takes their dot product.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregate_bank import CentroidBank, aggregate_features, nearest_centroid_distance
from .channel_reduce import ChannelSelection
from .errors import ConfigError, NpadError
from .gaussian_field import GaussianField, field_from_moments, mahalanobis_grid
from .neighbor_sim import shifted_slices, window_offsets
from .tensor_store import read_tensor, write_tensor


def score_d1(fm_test: np.ndarray, weighted_field: GaussianField, q: int) -> np.ndarray:
    """Minimum Mahalanobis distance to the weighted distributions in the
    size-q window around each pixel (clipped at the border)."""
    fm = np.asarray(fm_test, dtype=np.float64)
    height, width = weighted_field.grid_hw
    if fm.shape != (height, width, weighted_field.dim):
        raise ConfigError(
            f"test features {fm.shape} do not match field "
            f"({height},{width},{weighted_field.dim})"
        )
    chol_inv = weighted_field.chol_inv()
    out = np.full((height, width), np.inf)
    for off in window_offsets(q):
        target, source = shifted_slices(off, height, width)
        diff = fm[target] - weighted_field.mean[source]
        y = np.einsum("hwij,hwj->hwi", chol_inv[source], diff, optimize=True)
        dist = np.sqrt(np.einsum("hwi,hwi->hw", y, y))
        np.minimum(out[target], dist, out=out[target])
    return out


def score_d2(fm_test: np.ndarray, aggregate_field: GaussianField, p: int) -> np.ndarray:
    """Mahalanobis distance of the aggregated test feature at each pixel."""
    fm = np.asarray(fm_test, dtype=np.float64)
    height, width = aggregate_field.grid_hw
    if fm.shape != (height, width, aggregate_field.dim):
        raise ConfigError(
            f"test features {fm.shape} do not match field "
            f"({height},{width},{aggregate_field.dim})"
        )
    return mahalanobis_grid(aggregate_features(fm, p), aggregate_field)


def combine_maps(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """Pointwise geometric mean of the two maps."""
    if d1.shape != d2.shape:
        raise ConfigError(f"map shapes differ: {d1.shape} vs {d2.shape}")
    return np.sqrt(d1 * d2)


@dataclass(frozen=True)
class ImageScore:
    value: float
    top_pixels: tuple[tuple[int, int], ...]
    e_k: tuple[float, ...]  # nearest-centroid distances, ascending
    q_k: tuple[float, ...]  # top pixel distances, ascending


def image_score(
    d1: np.ndarray,
    fm_test_aggregated: np.ndarray,
    bank: CentroidBank,
    k_top: int,
) -> ImageScore:
    """Dot product of the ascending-sorted top-k pixel distances and the
    nearest-centroid distances at those pixels."""
    height, width = d1.shape
    if not 1 <= k_top <= height * width:
        raise ConfigError(f"k_top={k_top} outside [1, {height * width}]")
    flat = d1.ravel()
    # stable sort on the negated values: ties resolve to row-major order
    order = np.argsort(-flat, kind="stable")[:k_top]
    q_vals = flat[order]
    pixels = [(int(i) // width, int(i) % width) for i in order]
    e_vals = np.array(
        [nearest_centroid_distance(fm_test_aggregated[h, w], bank) for h, w in pixels]
    )
    e_sorted = np.sort(e_vals)
    q_sorted = np.sort(q_vals)
    value = float(np.dot(e_sorted, q_sorted))
    return ImageScore(
        value,
        tuple(pixels),
        tuple(float(v) for v in e_sorted),
        tuple(float(v) for v in q_sorted),
    )


def shift_feature_map(fm: np.ndarray, a: int, b: int) -> np.ndarray:
    """Feature-space stand-in for shifting the input image by (a, b):
    out[h, w] = fm[h+a, w+b], replicating edge values outside the grid."""
    height, width = fm.shape[:2]
    rows = np.clip(np.arange(height) + a, 0, height - 1)
    cols = np.clip(np.arange(width) + b, 0, width - 1)
    return fm[np.ix_(rows, cols)]


def translate_map_back(amap: np.ndarray, a: int, b: int) -> np.ndarray:
    """Undo a (a, b) content shift on an anomaly map, replicating edges."""
    height, width = amap.shape
    rows = np.clip(np.arange(height) - a, 0, height - 1)
    cols = np.clip(np.arange(width) - b, 0, width - 1)
    return amap[np.ix_(rows, cols)]


def shift_offsets(r: int) -> list[tuple[int, int]]:
    """All (a, b) in [-floor(r/2), floor(r/2)]^2, row-major; r=0 gives (0,0)."""
    if r < 0:
        raise ConfigError(f"shift size r must be >= 0, got {r}")
    half = r // 2
    return [(a, b) for a in range(-half, half + 1) for b in range(-half, half + 1)]


def shifted_manifest_scores(
    variants: Sequence[tuple[tuple[int, int], np.ndarray, ImageScore | float]],
    r: int,
    scale: tuple[float, float] = (1.0, 1.0),
) -> tuple[np.ndarray, float]:
    """Average the per-variant maps and scores of one image.

    Each map is translated back by its offset converted to feature-map
    scale; offsets that round below one feature pixel leave the map where
    it is. The image score is the plain mean of the variant scores.
    """
    half = r // 2
    seen: set[tuple[int, int]] = set()
    maps = []
    scores = []
    for offset, amap, score in variants:
        a, b = int(offset[0]), int(offset[1])
        if not (-half <= a <= half and -half <= b <= half):
            raise ConfigError(f"shift offset {offset} outside [-{half}, {half}]^2")
        if (a, b) in seen:
            raise ConfigError(f"duplicate shift offset {offset}")
        seen.add((a, b))
        fa = int(math.trunc(a * scale[0]))
        fb = int(math.trunc(b * scale[1]))
        maps.append(translate_map_back(np.asarray(amap, dtype=np.float64), fa, fb))
        scores.append(score.value if isinstance(score, ImageScore) else float(score))
    if (0, 0) not in seen:
        raise ConfigError("shift variants must include the (0,0) identity offset")
    final_map = np.mean(np.stack(maps), axis=0)
    return final_map, float(np.mean(scores))


def normalize_preview(amap: np.ndarray) -> np.ndarray:
    """8-bit preview normalized between the 20th and 80th percentile."""
    lo, hi = np.percentile(amap, [20.0, 80.0])
    if hi <= lo:
        return np.zeros(amap.shape, dtype=np.uint8)
    scaled = np.clip((amap - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    height, width = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(gray.astype(np.uint8).tobytes())


@dataclass
class ModelBundle:
    """Everything a scoring run needs, as fitted from nominal data."""

    selection: ChannelSelection
    weighted: GaussianField
    aggregate: GaussianField
    bank: CentroidBank
    config: dict

    def __post_init__(self):
        if self.weighted.grid_hw != self.aggregate.grid_hw:
            raise ConfigError("weighted and aggregate fields disagree on the grid")
        if not (
            self.weighted.dim == self.aggregate.dim == self.bank.centroids.shape[1]
        ):
            raise ConfigError("fields and bank disagree on the feature dimension")
        if self.selection.d != self.weighted.dim:
            raise ConfigError("selection size does not match the field dimension")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.weighted.grid_hw


_BUNDLE_TENSORS = {
    "weighted_mean.npad": lambda b: b.weighted.mean,
    "weighted_cov.npad": lambda b: b.weighted.covariance,
    "aggregate_mean.npad": lambda b: b.aggregate.mean,
    "aggregate_cov.npad": lambda b: b.aggregate.covariance,
    "centroids.npad": lambda b: b.bank.centroids,
}


def _canonical_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def bundle_content_hash(directory: Path) -> str:
    """SHA-256 over the bundle files, with meta.json's own hash field blanked."""
    digest = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        fpath = directory / name
        digest.update(name.encode("utf-8"))
        if name == "meta.json":
            with open(fpath, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            meta.pop("content_hash", None)
            digest.update(_canonical_json(meta))
        else:
            digest.update(fpath.read_bytes())
    return digest.hexdigest()


def save_bundle(bundle: ModelBundle, out_dir: str | Path, extra: dict | None = None) -> str:
    """Write the bundle to a fresh directory via temp-dir + atomic rename.

    Returns the content hash recorded in meta.json.
    """
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise NpadError(f"refusing to overwrite existing bundle at {out_dir}")
    tmp = out_dir.parent / (out_dir.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        for name, getter in _BUNDLE_TENSORS.items():
            write_tensor(tmp / name, np.asarray(getter(bundle), dtype=np.float64))
        meta = {
            "format": "npad-bundle",
            "version": 1,
            "config": bundle.config,
            "selection": list(bundle.selection.indices),
            "source_channels": bundle.selection.source_channels,
            "epsilon": bundle.weighted.epsilon,
            "bank": {
                "ratio": bundle.bank.ratio,
                "seed": bundle.bank.seed,
                "inertia": bundle.bank.inertia,
            },
        }
        if extra:
            for name, doc in extra.items():
                with open(tmp / name, "w", encoding="utf-8") as fh:
                    fh.write(_canonical_json(doc).decode("utf-8"))
        with open(tmp / "meta.json", "w", encoding="utf-8") as fh:
            fh.write(_canonical_json(meta).decode("utf-8"))
        content_hash = bundle_content_hash(tmp)
        meta["content_hash"] = content_hash
        with open(tmp / "meta.json", "w", encoding="utf-8") as fh:
            fh.write(_canonical_json(meta).decode("utf-8"))
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return content_hash


def load_bundle(directory: str | Path, verify: bool = True) -> ModelBundle:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise NpadError(f"{directory} is not a model bundle (no meta.json)")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "npad-bundle" or meta.get("version") != 1:
        raise NpadError(f"{directory}: unrecognized bundle format")
    if verify and "content_hash" in meta:
        actual = bundle_content_hash(directory)
        if actual != meta["content_hash"]:
            raise NpadError(
                f"{directory}: content hash mismatch (bundle corrupted or edited)"
            )
    epsilon = float(meta["epsilon"])
    tensors = {name: read_tensor(directory / name) for name in _BUNDLE_TENSORS}
    weighted = field_from_moments(
        tensors["weighted_mean.npad"], tensors["weighted_cov.npad"], epsilon
    )
    aggregate = field_from_moments(
        tensors["aggregate_mean.npad"], tensors["aggregate_cov.npad"], epsilon
    )
    bank_meta = meta["bank"]
    bank = CentroidBank(
        tensors["centroids.npad"],
        float(bank_meta["ratio"]),
        int(bank_meta["seed"]),
        float(bank_meta["inertia"]),
    )
    selection = ChannelSelection(
        tuple(int(i) for i in meta["selection"]), int(meta["source_channels"])
    )
    return ModelBundle(selection, weighted, aggregate, bank, dict(meta["config"]))
