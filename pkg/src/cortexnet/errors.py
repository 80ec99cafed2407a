"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class InputError(ValueError):
    """Caller-supplied data is out of range or malformed."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be written or read back."""
