"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so library code raises them instead of
returning sentinel values.
"""


class Gar3dError(Exception):
    """Base class for all package errors."""


class ContractError(Gar3dError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes do not agree."""


class ConfigError(Gar3dError, ValueError):
    """Model, cache or run configuration is inconsistent."""


class FormatError(Gar3dError, ValueError):
    """A serialized file or byte stream is malformed or incompatible."""


class DegenerateInputError(ContractError):
    """Input is numerically degenerate (rank deficient, collinear, ...)."""


class AlignmentError(DegenerateInputError):
    """Similarity alignment cannot be solved for the given points."""


class EmptySequenceError(ContractError):
    """An aggregate was requested over zero valid samples."""
