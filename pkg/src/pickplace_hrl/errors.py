"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite; the update was rejected."""


class ConfigurationError(RuntimeError):
    """A required artifact (checkpoint, stage output) is missing or malformed."""
