"""Exception types shared across the package."""


class CascnError(Exception):
    """Base class for all package errors."""


class DimensionError(CascnError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(CascnError):
    """Invalid or inconsistent configuration."""


class ContractError(CascnError):
    """An operation precondition was violated."""


class DataError(CascnError):
    """Dataset loading or layout problems."""


class CheckpointError(CascnError):
    """Corrupt or incompatible checkpoint file."""


class NumericalError(CascnError):
    """Non-finite values or a failed numerical invariant."""
