"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A hyperparameter or argument is outside its valid range."""


class ContractError(ValueError):
    """An input violates a call contract (shape, layout, emptiness, range)."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values."""


class ConfigurationError(ValueError):
    """A config file or config object is inconsistent or incomplete."""


class GenerationError(RuntimeError):
    """Synthetic rendering could not satisfy its own invariants."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is missing, corrupt, or incompatible."""
