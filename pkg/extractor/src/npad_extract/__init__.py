"""Backbone feature extraction emitting NPAD tensors and manifests."""

from .backbone import BACKBONES, ExtractorConfig, FeatureExtractor
from .extract import extract_dataset, scan_images
from .npad_io import read_tensor, write_manifest, write_tensor

__version__ = "0.1.0"
