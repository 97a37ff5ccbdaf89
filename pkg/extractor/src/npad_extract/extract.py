"""Folder scanning and the extraction pipeline.

Understands the MVTec-style layout (train/good, test/<kind>,
ground_truth/<kind>/<stem>_mask.*) and falls back to treating a flat folder
of images as nominal training data. Test images get shift variants when
shift_r > 0; training images are extracted once, unshifted.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import ExtractorConfig, FeatureExtractor, normalize_batch
from .npad_io import write_manifest, write_tensor
from .preprocess import (
    check_shift_fits,
    load_mask,
    load_rgb,
    shift_offsets,
    shifted_crop,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class SourceImage:
    path: Path
    role: str  # "train" | "test"
    label: int
    name: str  # unique stem used for output files
    mask: Path | None


def _images_in(folder: Path) -> list[Path]:
    return sorted(
        p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def scan_images(root: str | Path) -> list[SourceImage]:
    """Enumerate images with roles, labels and ground-truth mask paths."""
    root = Path(root)
    if not root.is_dir():
        raise RuntimeError(f"{root} is not a directory")
    sources: list[SourceImage] = []
    if (root / "train").is_dir():
        for sub in sorted((root / "train").iterdir()):
            if sub.is_dir():
                for img in _images_in(sub):
                    sources.append(
                        SourceImage(img, "train", 0, f"train_{sub.name}_{img.stem}", None)
                    )
        test_dir = root / "test"
        if test_dir.is_dir():
            for sub in sorted(test_dir.iterdir()):
                if not sub.is_dir():
                    continue
                label = 0 if sub.name == "good" else 1
                for img in _images_in(sub):
                    mask = None
                    if label == 1:
                        gt_dir = root / "ground_truth" / sub.name
                        if gt_dir.is_dir():
                            hits = sorted(gt_dir.glob(f"{img.stem}_mask.*"))
                            mask = hits[0] if hits else None
                    sources.append(
                        SourceImage(img, "test", label, f"test_{sub.name}_{img.stem}", mask)
                    )
    else:
        for img in _images_in(root):
            sources.append(SourceImage(img, "train", 0, f"train_{img.stem}", None))
    if not sources:
        raise RuntimeError(f"no images found under {root}")
    return sources


def extract_dataset(
    image_root: str | Path,
    out_dir: str | Path,
    config: ExtractorConfig,
    limit: int | None = None,
    batch_size: int = 8,
) -> Path:
    """Extract fused feature maps for a folder tree; returns the manifest path.

    Test images are extracted once per shift offset in the size-shift_r
    window, with the crop window displaced before cropping; the (0,0)
    variant carries the mask. Feature tensors are written f32 H x W x C.
    """
    check_shift_fits(config.resize, config.crop, config.shift_r)
    sources = scan_images(image_root)
    if limit is not None:
        train = [s for s in sources if s.role == "train"][:limit]
        test = [s for s in sources if s.role == "test"][:limit]
        sources = train + test
        if not sources:
            raise RuntimeError("--limit left no images to extract")

    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    extractor = FeatureExtractor(config)
    entries: list[dict] = []
    feature_hw: tuple[int, int] | None = None

    pending: list[tuple[np.ndarray, str, SourceImage, tuple[int, int] | None]] = []

    def flush():
        nonlocal feature_hw
        if not pending:
            return
        batch = normalize_batch(np.stack([crop for crop, _, _, _ in pending]))
        features = extractor.features(batch)
        if feature_hw is None:
            feature_hw = (features.shape[1], features.shape[2])
        for fused, (_, name, src, shift) in zip(features, pending):
            rel = f"tensors/{name}.npad"
            write_tensor(out_dir / rel, fused)
            mask_rel = None
            if shift in (None, (0, 0)) and src.mask is not None:
                resized_mask = load_mask(src.mask, config.resize)
                cropped = shifted_crop(resized_mask, config.crop, 0, 0)
                mask_rel = f"masks/{src.name}_mask.npad"
                write_tensor(out_dir / mask_rel, cropped)
            entries.append(
                {
                    "tensor": rel,
                    "role": src.role,
                    "label": src.label,
                    "mask": mask_rel,
                    "shift": list(shift) if shift is not None else None,
                }
            )
        pending.clear()

    for src in sources:
        resized = load_rgb(src.path, config.resize)
        if src.role == "test" and config.shift_r > 0:
            for a, b in shift_offsets(config.shift_r):
                name = (
                    src.name
                    if (a, b) == (0, 0)
                    else f"{src.name}.shift_{a}_{b}"
                )
                pending.append(
                    (shifted_crop(resized, config.crop, a, b), name, src, (a, b))
                )
                if len(pending) >= batch_size:
                    flush()
        else:
            pending.append((shifted_crop(resized, config.crop, 0, 0), src.name, src, None))
            if len(pending) >= batch_size:
                flush()
    flush()

    manifest_path = out_dir / "manifest.json"
    write_manifest(
        manifest_path, feature_hw, (config.crop, config.crop), entries
    )
    return manifest_path
