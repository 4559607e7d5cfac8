"""Exception hierarchy shared by every sfpnet module."""


class SFPError(Exception):
    """Base class for all sfpnet errors."""


class InputError(SFPError, ValueError):
    """Malformed user input (non-finite points, empty scans)."""


class RangeError(SFPError, OverflowError):
    """A voxel coordinate does not fit in 32-bit signed range."""


class ConfigError(SFPError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(SFPError, ValueError):
    """Arguments violate an operator precondition (shape, rulebook match)."""


class ConsistencyError(SFPError, IndexError):
    """A voxel map does not match the tensor it indexes."""


class FormatError(SFPError, ValueError):
    """A scan, label or checkpoint file is truncated or corrupt."""


class TrainingError(SFPError, FloatingPointError):
    """Non-finite loss or gradient during optimisation."""


class OracleError(SFPError, RuntimeError):
    """An oracle detected non-deterministic evaluation."""
