"""Exception hierarchy shared across the package."""


class IterPruneError(Exception):
    """Base class for all package errors."""


class DimensionError(IterPruneError, ValueError):
    """Tensor shapes or layer geometry do not line up."""


class InputError(IterPruneError, ValueError):
    """Invalid input values (labels out of range and similar)."""


class UsageError(IterPruneError, RuntimeError):
    """An API was called out of order or with unsupported arguments."""


class NumericError(IterPruneError, ArithmeticError):
    """NaN or Inf showed up where finite values are required."""


class FormatError(IterPruneError, ValueError):
    """A data or checkpoint file does not match its binary format."""


class PolicyError(IterPruneError, RuntimeError):
    """A pruning policy cannot produce a decision."""


class IntegrityError(IterPruneError, ValueError):
    """Checkpoint/model mismatch or corrupted payload."""


class ConfigError(IterPruneError, ValueError):
    """Unparseable config, unknown keys or out-of-range values."""
