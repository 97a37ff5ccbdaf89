"""Writer for the NPAD tensor format and the dataset manifest.

Wire format (shared contract with the scoring side): bytes "NPAD",
u8 version=1, u8 dtype code (0=f32, 1=f64, 2=u8), u8 ndim, ndim x u32
little-endian dims, payload little-endian row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NPAD"
VERSION = 1
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    if arr.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4 or any(s <= 0 for s in arr.shape):
        raise ValueError(f"bad tensor shape {arr.shape}")
    code = _CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Minimal reader, used by this package's own tests."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or raw[4] != VERSION:
        raise ValueError(f"{path} is not an NPAD v{VERSION} file")
    code, ndim = raw[5], raw[6]
    shape = struct.unpack(f"<{ndim}I", raw[7 : 7 + 4 * ndim])
    dtype = _DTYPES[code]
    payload = raw[7 + 4 * ndim :]
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_manifest(
    path: str | Path,
    feature_hw: tuple[int, int],
    image_hw: tuple[int, int],
    entries: list[dict],
) -> None:
    doc = {
        "feature_hw": list(feature_hw),
        "image_hw": list(image_hw),
        "entries": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
