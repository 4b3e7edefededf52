"""Exception types shared across the package."""


class LipShiftError(Exception):
    """Base class for all package errors."""


class DimensionError(LipShiftError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LipShiftError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(LipShiftError, ValueError):
    """Invalid configuration value."""


class FormatError(LipShiftError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class TrainingError(LipShiftError, RuntimeError):
    """Training produced non-finite values."""


class AttackError(LipShiftError, RuntimeError):
    """The attacker produced non-finite gradients."""
