"""Binary NPAD tensor files and the JSON dataset manifest.

File layout: magic "NPAD", u8 version, u8 dtype code (0=f32, 1=f64, 2=u8),
u8 ndim, ndim x u32 little-endian dims, then the payload as little-endian
values in row-major order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    NpadError,
    TensorFormatError,
    TruncatedFileError,
    UnknownDtypeError,
)

MAGIC = b"NPAD"
VERSION = 1

_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_NAMES = {0: "f32", 1: "f64", 2: "u8"}
_NUMPY_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}

MAX_NDIM = 4


def _validate_array(arr: np.ndarray) -> int:
    if arr.dtype not in _NUMPY_CODES:
        raise TensorFormatError(
            f"unsupported dtype {arr.dtype}; expected one of f32/f64/u8"
        )
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise TensorFormatError(f"tensor must have 1-{MAX_NDIM} dims, got {arr.ndim}")
    if any(s <= 0 for s in arr.shape):
        raise TensorFormatError(f"tensor dims must be positive, got {arr.shape}")
    return _NUMPY_CODES[arr.dtype]


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write an array as an NPAD tensor file (f32/f64/u8, 1-4 dims)."""
    code = _validate_array(arr)
    path = Path(path)
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code]).tobytes())
    except OSError as exc:
        raise NpadError(f"cannot write tensor to {path}: {exc}") from exc


def _read_header(fh, path: Path) -> tuple[tuple[int, ...], int]:
    head = fh.read(7)
    if len(head) < 7:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    if head[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {head[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = head[4], head[5], head[6]
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported format version {version}")
    if code not in _CODE_DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise TensorFormatError(f"{path}: ndim {ndim} outside 1-{MAX_NDIM}")
    dim_bytes = fh.read(4 * ndim)
    if len(dim_bytes) < 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated inside the dims block")
    shape = struct.unpack(f"<{ndim}I", dim_bytes)
    if any(s == 0 for s in shape):
        raise TensorFormatError(f"{path}: zero-sized dim in {shape}")
    return shape, code


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an NPAD tensor file, validating magic, version and length."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            shape, code = _read_header(fh, path)
            dtype = _CODE_DTYPES[code]
            count = int(np.prod(shape))
            payload = fh.read(count * dtype.itemsize + 1)
    except OSError as exc:
        raise NpadError(f"cannot read tensor from {path}: {exc}") from exc
    if len(payload) < count * dtype.itemsize:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"header promises {count * dtype.itemsize}"
        )
    if len(payload) > count * dtype.itemsize:
        raise TensorFormatError(f"{path}: trailing bytes after the payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_tensor_header(path: str | Path) -> tuple[tuple[int, ...], str]:
    """Read only shape and dtype name, without loading the payload."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            shape, code = _read_header(fh, path)
    except OSError as exc:
        raise NpadError(f"cannot read tensor header from {path}: {exc}") from exc
    return shape, _CODE_NAMES[code]


@dataclass(frozen=True)
class ManifestEntry:
    tensor: Path
    role: str  # "train" | "test"
    label: int | None
    mask: Path | None
    shift: tuple[int, int] | None


@dataclass
class DatasetManifest:
    feature_hw: tuple[int, int]
    image_hw: tuple[int, int]
    entries: list[ManifestEntry]
    channels: int

    @property
    def train_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == "train"]

    @property
    def test_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == "test"]


def _as_hw(value, name: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and v > 0 for v in value)
    ):
        raise ManifestError(f"{name} must be a pair of positive integers, got {value!r}")
    return int(value[0]), int(value[1])


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest.

    Tensor headers are read up front so shape mismatches surface here, not
    midway through a fit or scoring run.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc

    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be a JSON object")
    feature_hw = _as_hw(doc.get("feature_hw"), "feature_hw")
    image_hw = _as_hw(doc.get("image_hw"), "image_hw")
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ManifestError(f"{path}: entries must be a non-empty list")

    root = path.parent
    entries: list[ManifestEntry] = []
    channels: int | None = None
    for i, raw in enumerate(raw_entries):
        where = f"{path} entry {i}"
        if not isinstance(raw, dict) or "tensor" not in raw or "role" not in raw:
            raise ManifestError(f"{where}: needs at least 'tensor' and 'role'")
        role = raw["role"]
        if role not in ("train", "test"):
            raise ManifestError(f"{where}: role must be 'train' or 'test', got {role!r}")
        label = raw.get("label")
        if label is not None and label not in (0, 1):
            raise ManifestError(f"{where}: label must be 0 or 1, got {label!r}")
        if role == "train" and label == 1:
            raise ManifestError(
                f"{where}: train entries must be nominal (label absent or 0)"
            )
        if role == "test" and label is None:
            raise ManifestError(f"{where}: test entries need an explicit label")
        shift = raw.get("shift")
        if shift is not None:
            if (
                not isinstance(shift, (list, tuple))
                or len(shift) != 2
                or not all(isinstance(v, int) for v in shift)
            ):
                raise ManifestError(f"{where}: shift must be an integer pair")
            shift = (int(shift[0]), int(shift[1]))

        tensor_path = root / raw["tensor"]
        if not tensor_path.is_file():
            raise ManifestError(f"{where}: missing tensor file {tensor_path}")
        shape, dtype = read_tensor_header(tensor_path)
        if len(shape) != 3:
            raise ManifestError(
                f"{where}: feature tensors must be H x W x C, got shape {shape}"
            )
        if dtype not in ("f32", "f64"):
            raise ManifestError(f"{where}: feature tensor dtype must be f32/f64")
        if (shape[0], shape[1]) != feature_hw:
            raise ManifestError(
                f"{where}: tensor {tensor_path.name} is {shape[0]}x{shape[1]}, "
                f"manifest feature_hw is {feature_hw[0]}x{feature_hw[1]}"
            )
        if channels is None:
            channels = shape[2]
        elif shape[2] != channels:
            raise ManifestError(
                f"{where}: tensor {tensor_path.name} has {shape[2]} channels, "
                f"earlier entries have {channels}"
            )

        mask_path = None
        if raw.get("mask") is not None:
            mask_path = root / raw["mask"]
            if not mask_path.is_file():
                raise ManifestError(f"{where}: missing mask file {mask_path}")
            mshape, mdtype = read_tensor_header(mask_path)
            if mdtype != "u8" or len(mshape) != 2 or tuple(mshape) != image_hw:
                raise ManifestError(
                    f"{where}: mask {mask_path.name} must be u8 "
                    f"{image_hw[0]}x{image_hw[1]}, got {mdtype} {mshape}"
                )

        entries.append(ManifestEntry(tensor_path, role, label, mask_path, shift))

    return DatasetManifest(feature_hw, image_hw, entries, int(channels))


def load_mask(path: str | Path, image_hw: tuple[int, int]) -> np.ndarray:
    """Load a binary u8 mask, checking shape and {0,1} values."""
    mask = read_tensor(path)
    if mask.ndim != 2 or mask.shape != tuple(image_hw) or mask.dtype != np.uint8:
        raise ManifestError(f"mask {path} must be u8 {image_hw[0]}x{image_hw[1]}")
    if not np.isin(mask, (0, 1)).all():
        raise ManifestError(f"mask {path} contains values other than 0/1")
    return mask
