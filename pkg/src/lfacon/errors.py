"""Exception types shared across the package."""


class LfaconError(Exception):
    """Base class for all package errors."""


class ShapeError(LfaconError):
    """Tensor extents do not line up for the requested operation."""


class ValidationError(LfaconError):
    """Input data violates a value-level contract (non-finite, wrong length)."""


class ContractError(LfaconError):
    """An operation precondition was violated."""


class ConfigError(LfaconError):
    """A configuration value is outside its allowed domain."""


class FormatError(LfaconError):
    """A file does not conform to its on-disk format."""


class UndefinedResultError(LfaconError):
    """A statistic is undefined for the given inputs (e.g. zero variance)."""


class DivergenceError(LfaconError):
    """Training produced a non-finite loss."""
