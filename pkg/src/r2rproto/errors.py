"""Exception hierarchy shared by every module of the package."""


class R2RError(Exception):
    """Base class for all package errors."""


class DimensionError(R2RError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(R2RError, ValueError):
    """A documented precondition was violated."""


class NumericError(R2RError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class ConfigError(R2RError, ValueError):
    """Model or run configuration is inconsistent."""


class FormatError(R2RError, ValueError):
    """A binary file (image, checkpoint) is malformed."""


class ParseError(R2RError, ValueError):
    """A text file (CSV manifest, JSON config) is malformed."""


class IngestionError(R2RError, OSError):
    """A file referenced by a manifest cannot be found."""


class UndefinedMetricError(R2RError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""
