"""Exception hierarchy shared across the toolkit."""


class PnisegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PnisegError, ValueError):
    """Invalid configuration or precondition violation."""


class GeometryError(PnisegError, ValueError):
    """Extents or regions that do not fit together."""


class BoundsError(GeometryError):
    """A region lies entirely outside its source."""


class NumericError(PnisegError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class DataError(PnisegError):
    """Dataset files or manifests that cannot be used."""


class ManifestParseError(DataError):
    pass


class DanglingPathError(DataError):
    pass


class DuplicateIdError(DataError):
    pass
