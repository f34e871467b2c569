"""Exception hierarchy shared by all volsurf modules."""


class VolSurfError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VolSurfError, ValueError):
    """Tensor or array dimensions do not agree."""


class ConfigError(VolSurfError, ValueError):
    """Invalid model or experiment configuration."""


class DomainError(VolSurfError, ValueError):
    """Pricing input outside the model's domain (e.g. nonpositive spot)."""


class DegenerateInputError(DomainError):
    """Greeks requested at tau=0 or sigma=0, where only limits exist."""


class InversionDomainError(DomainError):
    """Option price outside the no-arbitrage bounds, so no implied vol exists."""


class ConvergenceError(VolSurfError, RuntimeError):
    """An iterative solver ran out of iterations."""


class DataError(VolSurfError):
    """Base class for data ingestion and file-format problems."""


class IngestionError(DataError, ValueError):
    """A day's quotes cannot be turned into a grid."""


class SeriesParseError(DataError, ValueError):
    """Malformed grid-series file."""


class UnsupportedVersionError(SeriesParseError):
    """File declares a format version this reader does not understand."""


class CoverageError(DataError, ValueError):
    """Series does not cover a requested date range."""


class TrainingDivergenceError(VolSurfError, RuntimeError):
    """Loss became non-finite during training."""
