"""Neighborhood-weighted per-pixel Gaussian anomaly detection toolkit."""

from .aggregate_bank import (
    CentroidBank,
    aggregate_features,
    build_centroid_bank,
    fit_aggregate_field,
    nearest_centroid_distance,
)
from .channel_reduce import (
    ChannelSelection,
    apply_selection,
    count_nonzero_per_channel,
    select_channels,
)
from .errors import (
    BadMagicError,
    ConfigError,
    FitError,
    ManifestError,
    NpadError,
    TensorFormatError,
    TruncatedFileError,
    UnknownDtypeError,
)
from .evaluation import auroc, connected_components, pro_score, upsample_map
from .gaussian_field import GaussianField, fit_pixel_gaussians, mahalanobis
from .inference import (
    ImageScore,
    ModelBundle,
    combine_maps,
    image_score,
    load_bundle,
    save_bundle,
    score_d1,
    score_d2,
    shifted_manifest_scores,
)
from .neighbor_sim import (
    Neighborhood,
    WeightField,
    bhattacharyya_bc,
    fit_weighted_field,
    neighborhood,
    similarity_weight,
)
from .tensor_store import (
    DatasetManifest,
    ManifestEntry,
    load_manifest,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"
