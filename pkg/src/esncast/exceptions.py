"""Exception types raised across the package."""


class EsnCastError(Exception):
    """Base class for all package-specific errors."""


class InvalidDimensionError(EsnCastError, ValueError):
    """A matrix or vector dimension is zero, negative, or mismatched."""


class DomainError(EsnCastError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateSampleError(EsnCastError, ValueError):
    """A sample is too degenerate to estimate from (e.g. all values identical)."""


class InsufficientHistoryError(EsnCastError, ValueError):
    """A feature vector was requested inside the lag warm-up region."""


class NumericError(EsnCastError, RuntimeError):
    """A numerical routine failed to converge or produced non-finite output."""


class LookaheadError(EsnCastError, RuntimeError):
    """The provenance audit detected data from after the forecast origin."""


class PanelLoadError(EsnCastError, ValueError):
    """An input panel file violates the expected schema."""


class ConfigError(EsnCastError, ValueError):
    """A configuration is internally inconsistent or exceeds the data."""
