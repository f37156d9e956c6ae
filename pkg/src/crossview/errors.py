"""Exception types shared across the package."""


class CrossViewError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CrossViewError):
    """Operands have incompatible shapes or ranks."""


class DomainError(CrossViewError):
    """A value is outside the mathematical domain of an operation."""


class RangeError(CrossViewError):
    """An index or count argument is out of its allowed range."""


class ContractError(CrossViewError):
    """A caller violated a documented precondition."""


class ConfigError(CrossViewError):
    """A configuration value is invalid or inconsistent."""


class DataError(CrossViewError):
    """A dataset, file, or on-disk artifact is malformed."""


class NumericError(CrossViewError):
    """A numeric computation produced NaN/Inf or failed to converge."""


class NormalizationError(CrossViewError):
    """A vector with zero norm cannot be normalized."""


class StaleEmbeddingsError(CrossViewError):
    """The feature-similarity table is older than the refresh interval allows."""


class CheckpointError(CrossViewError):
    """Checkpoint contents do not match the requested configuration."""
