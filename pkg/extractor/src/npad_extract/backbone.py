"""Backbone construction and multi-hierarchy feature extraction.

Features are taken at the final output of each spatial resolution block
(layer1/2/3 of the ResNet family); higher levels are bilinearly
interpolated to the lowest selected level's size and channel-concatenated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torchvision import models

BACKBONES = {
    "wide_resnet50": models.wide_resnet50_2,
    "resnet50": models.resnet50,
    "resnet18": models.resnet18,
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExtractorConfig:
    backbone: str = "wide_resnet50"
    levels: tuple[int, ...] = (1, 2, 3)
    resize: int = 256
    crop: int = 224
    shift_r: int = 0
    weights: str = "default"  # "default" | "none" | path to a state dict
    device: str = "cpu"
    seed: int = 0

    def __post_init__(self):
        self.levels = tuple(sorted(set(int(v) for v in self.levels)))
        if not self.levels or not set(self.levels) <= {1, 2, 3}:
            raise ValueError("levels must be a non-empty subset of {1,2,3}")
        if self.crop > self.resize:
            raise ValueError(f"crop {self.crop} exceeds resize {self.resize}")
        if self.backbone not in BACKBONES:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}"
            )
        if self.shift_r < 0:
            raise ValueError("shift_r must be >= 0")


def load_backbone(config: ExtractorConfig) -> torch.nn.Module:
    ctor = BACKBONES[config.backbone]
    if config.weights == "default":
        try:
            model = ctor(weights="DEFAULT")
        except Exception as exc:
            raise RuntimeError(
                f"pretrained weights for {config.backbone} are unavailable "
                f"({exc}); pass --weights <path> or --weights none"
            ) from exc
    elif config.weights == "none":
        torch.manual_seed(config.seed)
        model = ctor(weights=None)
    else:
        model = ctor(weights=None)
        state = torch.load(config.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    model.to(config.device)
    return model


class FeatureExtractor:
    """Runs the backbone stem plus layer1-3 and fuses the requested levels."""

    def __init__(self, config: ExtractorConfig):
        self.config = config
        self.model = load_backbone(config)

    @torch.no_grad()
    def level_maps(self, batch: torch.Tensor) -> dict[int, torch.Tensor]:
        m = self.model
        x = m.maxpool(m.relu(m.bn1(m.conv1(batch))))
        f1 = m.layer1(x)
        out = {1: f1}
        f2 = m.layer2(f1)
        out[2] = f2
        out[3] = m.layer3(f2)
        return out

    @torch.no_grad()
    def features(self, batch: torch.Tensor) -> np.ndarray:
        """(B, 3, H, W) normalized batch -> (B, Hf, Wf, C) fused features."""
        maps = self.level_maps(batch.to(self.config.device))
        selected = [maps[level] for level in self.config.levels]
        target = selected[0].shape[-2:]
        fused = [
            f
            if f.shape[-2:] == target
            else F.interpolate(f, size=target, mode="bilinear", align_corners=False)
            for f in selected
        ]
        stacked = torch.cat(fused, dim=1)
        return stacked.permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def normalize_batch(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) uint8 RGB -> normalized float batch (B, 3, H, W)."""
    batch = torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (batch - mean) / std
