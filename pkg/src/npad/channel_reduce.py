"""Channel selection: keep the d channels with the fewest nonzero activations.

Backbone features come out of a ReLU, so channels that stay mostly at zero
are the ones whose surviving values look closest to Gaussian; those are the
channels worth keeping for per-pixel Gaussian modeling.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

DEFAULT_CHANNELS = 550


@dataclass(frozen=True)
class ChannelSelection:
    """Strictly increasing channel indices chosen from source_channels."""

    indices: tuple[int, ...]
    source_channels: int

    def __post_init__(self):
        if len(self.indices) == 0 or len(self.indices) > self.source_channels:
            raise ConfigError("selection size must be in [1, source_channels]")
        if list(self.indices) != sorted(set(self.indices)):
            raise ConfigError("selection indices must be strictly increasing")
        if self.indices[-1] >= self.source_channels:
            raise ConfigError("selection index out of range")

    @property
    def d(self) -> int:
        return len(self.indices)


def count_nonzero_per_channel(
    train_features: Sequence[np.ndarray], absolute: bool = False
) -> np.ndarray:
    """Count entries > 0 per channel across all maps and pixels.

    With absolute=True the test becomes |x| > 0, for features exported
    before the ReLU.
    """
    if len(train_features) == 0:
        raise ConfigError("need at least one feature map to count activations")
    shape = train_features[0].shape
    counts = np.zeros(shape[2], dtype=np.int64)
    for fm in train_features:
        if fm.shape != shape:
            raise ConfigError(f"feature map shapes differ: {fm.shape} vs {shape}")
        values = np.abs(fm) if absolute else fm
        counts += (values > 0).sum(axis=(0, 1), dtype=np.int64)
    return counts


def select_channels(counts: np.ndarray, d: int) -> ChannelSelection:
    """Pick the d channels with the smallest counts, ties to the lower index."""
    counts = np.asarray(counts)
    if d < 1 or d > counts.size:
        raise ConfigError(f"d={d} outside [1, {counts.size}]")
    # stable sort keeps the lower channel index first among equal counts
    order = np.argsort(counts, kind="stable")[:d]
    return ChannelSelection(tuple(sorted(int(i) for i in order)), counts.size)


def apply_selection(fm: np.ndarray, sel: ChannelSelection) -> np.ndarray:
    """Gather the selected channels; H and W are untouched."""
    if fm.shape[2] != sel.source_channels:
        raise ConfigError(
            f"feature map has {fm.shape[2]} channels, selection expects "
            f"{sel.source_channels}"
        )
    return fm[:, :, list(sel.indices)]
