"""Exception types shared across the package."""


class NpadError(Exception):
    """Base class for all errors raised by this package."""


class TensorFormatError(NpadError):
    """The file is not a valid NPAD tensor."""


class BadMagicError(TensorFormatError):
    """The file does not start with the NPAD magic bytes."""


class UnknownDtypeError(TensorFormatError):
    """The dtype code in the header is not one of f32/f64/u8."""


class TruncatedFileError(TensorFormatError):
    """The file is shorter than its header promises."""


class ManifestError(NpadError):
    """The dataset manifest is malformed or inconsistent."""


class ConfigError(NpadError):
    """A hyperparameter is outside its documented range."""


class FitError(NpadError):
    """Statistical fitting failed (degenerate inputs, non-PD covariance)."""
