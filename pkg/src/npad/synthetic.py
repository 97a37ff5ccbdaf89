"""Seeded synthetic feature-map datasets for self-contained runs.

Each channel is a shared smooth spatial template plus per-image smooth
noise, so per-pixel statistics are well defined and a small global jitter
emulates the marginal misalignment the shifting machinery is meant to
absorb. Anomalies are mean-shifted rectangular patches with ground-truth
masks written at a configurable image scale.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .tensor_store import write_tensor

SMOOTH_SIGMA = 0.8


def _smooth_noise(rng: np.random.Generator, shape, sigma: float, norm: float):
    field = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return field / norm


def _filter_norm(height: int, width: int, sigma: float) -> float:
    impulse = np.zeros((height, width))
    impulse[height // 2, width // 2] = 1.0
    response = gaussian_filter(impulse, sigma, mode="constant")
    return float(np.sqrt((response**2).sum()))


def _apply_jitter(arr: np.ndarray, a: int, b: int) -> np.ndarray:
    height, width = arr.shape[:2]
    rows = np.clip(np.arange(height) + a, 0, height - 1)
    cols = np.clip(np.arange(width) + b, 0, width - 1)
    return arr[np.ix_(rows, cols)]


def generate_dataset(
    out_dir: str | Path,
    n_train: int = 50,
    n_test_nominal: int = 20,
    n_test_anomalous: int = 20,
    height: int = 16,
    width: int = 16,
    channels: int = 8,
    image_scale: int = 4,
    anomaly_amplitude: float = 3.0,
    weak_amplitude: float | None = None,
    jitter: int = 0,
    seed: int = 7,
    base_level: float = 2.0,
    template_amplitude: float = 0.8,
    noise_sigma: float = 1.0,
) -> Path:
    """Write tensors, masks and a manifest; returns the manifest path.

    Amplitudes are in units of the per-pixel noise standard deviation, so
    3.0 produces clearly separable defects. Anomalies alternate between
    compact patches at anomaly_amplitude and broad patches at
    weak_amplitude (same value when unset); the broad kind rewards
    neighborhood aggregation, the compact kind rewards per-pixel scoring.
    """
    if min(n_train, n_test_nominal, n_test_anomalous) < 1:
        raise ConfigError("need at least one image per split")
    if jitter < 0 or image_scale < 1:
        raise ConfigError("jitter must be >= 0 and image_scale >= 1")
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    norm = _filter_norm(height, width, SMOOTH_SIGMA)
    template = np.stack(
        [
            _smooth_noise(rng, (height, width), SMOOTH_SIGMA, norm)
            * template_amplitude
            for _ in range(channels)
        ],
        axis=-1,
    )

    def nominal_map() -> np.ndarray:
        noise = np.stack(
            [
                _smooth_noise(rng, (height, width), SMOOTH_SIGMA, norm) * noise_sigma
                for _ in range(channels)
            ],
            axis=-1,
        )
        return base_level + template + noise

    margin = jitter + 1
    compact_hi = max(3, min(4, height // 4))
    broad_lo = min(5, max(3, height // 3))
    broad_hi = max(broad_lo + 1, min(8, height - 2 * margin))

    def anomaly_patch(broad: bool) -> tuple[slice, slice]:
        lo, hi = (broad_lo, broad_hi) if broad else (2, compact_hi)
        ph = int(rng.integers(lo, hi))
        pw = int(rng.integers(lo, hi))
        top = int(rng.integers(margin, height - margin - ph + 1))
        left = int(rng.integers(margin, width - margin - pw + 1))
        return slice(top, top + ph), slice(left, left + pw)

    entries = []

    def emit(name: str, fm: np.ndarray, role: str, label: int | None, mask=None):
        if jitter > 0:
            a = int(rng.integers(-jitter, jitter + 1))
            b = int(rng.integers(-jitter, jitter + 1))
            fm = _apply_jitter(fm, a, b)
            if mask is not None:
                mask = _apply_jitter(mask, a * image_scale, b * image_scale)
        write_tensor(out_dir / "tensors" / f"{name}.npad", fm.astype(np.float32))
        mask_rel = None
        if mask is not None:
            mask_rel = f"masks/{name}_mask.npad"
            write_tensor(out_dir / mask_rel, mask.astype(np.uint8))
        entries.append(
            {
                "tensor": f"tensors/{name}.npad",
                "role": role,
                "label": label,
                "mask": mask_rel,
                "shift": None,
            }
        )

    for i in range(n_train):
        emit(f"train_{i:03d}", nominal_map(), "train", 0)
    for i in range(n_test_nominal):
        emit(f"test_nom_{i:03d}", nominal_map(), "test", 0)
    if weak_amplitude is None:
        weak_amplitude = anomaly_amplitude
    for i in range(n_test_anomalous):
        fm = nominal_map()
        broad = i % 2 == 1
        rows, cols = anomaly_patch(broad)
        amplitude = weak_amplitude if broad else anomaly_amplitude
        fm[rows, cols, :] += amplitude * noise_sigma
        mask = np.zeros((height * image_scale, width * image_scale), dtype=np.uint8)
        mask[
            rows.start * image_scale : rows.stop * image_scale,
            cols.start * image_scale : cols.stop * image_scale,
        ] = 1
        emit(f"test_anom_{i:03d}", fm, "test", 1, mask)

    manifest = {
        "feature_hw": [height, width],
        "image_hw": [height * image_scale, width * image_scale],
        "entries": entries,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    params = {
        "n_train": n_train,
        "n_test_nominal": n_test_nominal,
        "n_test_anomalous": n_test_anomalous,
        "height": height,
        "width": width,
        "channels": channels,
        "image_scale": image_scale,
        "anomaly_amplitude": anomaly_amplitude,
        "weak_amplitude": weak_amplitude,
        "jitter": jitter,
        "seed": seed,
        "base_level": base_level,
        "template_amplitude": template_amplitude,
        "noise_sigma": noise_sigma,
        "smooth_sigma": SMOOTH_SIGMA,
    }
    with open(out_dir / "generator.json", "w", encoding="utf-8") as fh:
        json.dump(params, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
