"""Image loading, resize, and (shifted) center cropping.

Shift variants move the crop window inside the resized image instead of
translating pixels, so no border content is ever fabricated; the available
margin is (resize - crop) // 2 per side.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def shift_offsets(r: int) -> list[tuple[int, int]]:
    half = r // 2
    return [(a, b) for a in range(-half, half + 1) for b in range(-half, half + 1)]


def crop_margin(resize: int, crop: int) -> int:
    return (resize - crop) // 2


def check_shift_fits(resize: int, crop: int, r: int) -> None:
    margin = crop_margin(resize, crop)
    if r // 2 > margin:
        raise ValueError(
            f"shift radius {r // 2} exceeds the {margin}px crop margin of "
            f"resize {resize} / crop {crop}; use a smaller --shift-r"
        )


def load_rgb(path: str | Path, resize: int) -> np.ndarray:
    """Read an image, force RGB, resize to (resize, resize) uint8."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((resize, resize), Image.BILINEAR)
    except OSError as exc:
        raise RuntimeError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8)


def load_mask(path: str | Path, resize: int) -> np.ndarray:
    """Read a ground-truth mask, nearest-resize, binarize to u8 {0,1}."""
    with Image.open(path) as img:
        gray = img.convert("L").resize((resize, resize), Image.NEAREST)
    return (np.asarray(gray) > 0).astype(np.uint8)


def shifted_crop(resized: np.ndarray, crop: int, a: int, b: int) -> np.ndarray:
    """Crop window displaced by (a, b) rows/cols from the centered position."""
    size = resized.shape[0]
    top = crop_margin(size, crop) + a
    left = crop_margin(size, crop) + b
    if not (0 <= top <= size - crop and 0 <= left <= size - crop):
        raise ValueError(
            f"shift ({a},{b}) pushes the {crop}px crop outside the "
            f"{size}px resized image"
        )
    return resized[top : top + crop, left : left + crop]
