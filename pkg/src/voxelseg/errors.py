"""Exception types shared across the package."""


class VoxelSegError(Exception):
    """Base class for all package errors."""


class ContractViolationError(VoxelSegError, ValueError):
    """A caller broke an operation's precondition."""


class ShapeError(ContractViolationError):
    """Array extents are incompatible with the requested operation."""


class DomainError(ContractViolationError):
    """A value is outside the mathematical domain of the operation."""


class ConfigError(ContractViolationError):
    """A configuration document violates one of its invariants."""


class FormatError(VoxelSegError, RuntimeError):
    """An on-disk artifact is malformed or inconsistent with its header."""


class NumericError(VoxelSegError, RuntimeError):
    """A computation produced non-finite values where finite ones are required."""


class GenerationError(VoxelSegError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DegenerateVarianceError(ContractViolationError):
    """A statistic is undefined because the sample variance is zero."""


class UndefinedIccError(ContractViolationError):
    """ICC is undefined because the total variance is zero."""
