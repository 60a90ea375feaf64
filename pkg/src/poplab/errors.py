"""Exception types shared across the package."""


class PopError(Exception):
    """Base class for all errors raised by poplab."""


class ConfigError(PopError, ValueError):
    """Invalid configuration or hyperparameter."""


class DimensionError(PopError, ValueError):
    """Operand shapes do not agree."""


class ContractError(PopError, ValueError):
    """A documented precondition was violated."""


class CapacityError(PopError, ValueError):
    """Sequence would exceed the model's maximum length."""


class FormatError(PopError, ValueError):
    """Malformed file (checkpoint, profile, plan, ...)."""


class DataError(PopError, ValueError):
    """Input data is missing, empty or too small."""


class VocabIndexError(PopError, IndexError):
    """Token id outside the vocabulary."""
