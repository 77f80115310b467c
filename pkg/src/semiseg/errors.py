"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigurationError(ValueError):
    """A config object or config file is invalid."""


class ContractViolation(RuntimeError):
    """An input broke a documented data contract (e.g. unnormalized probabilities)."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finite arithmetic was required."""


class UndefinedMetricError(RuntimeError):
    """A metric was requested from an empty accumulator."""
