"""Exception hierarchy shared by every module of the package."""


class HmmoeError(Exception):
    """Base class for all package errors."""


class DimensionError(HmmoeError, ValueError):
    """Operand shapes are incompatible."""


class EmptySequenceError(DimensionError):
    """A sequence axis that must be non-empty has length zero."""


class ConfigurationError(HmmoeError, ValueError):
    """An experiment or layer configuration violates its invariants.

    ``field`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ContractError(HmmoeError, RuntimeError):
    """A caller broke an API precondition (wrong arity, untagged data, ...)."""


class DeterminismError(HmmoeError, RuntimeError):
    """A function expected to be deterministic returned differing values."""


class DataError(HmmoeError, ValueError):
    """Input data is malformed, e.g. a label outside ``[0, C)``."""
