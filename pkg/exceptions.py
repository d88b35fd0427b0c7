"""
Streaming G2PnP Errors
Error categories shared by every module and mapped to CLI exit codes
"""


class G2PnPError(Exception):
    """Base class for all errors raised by this project."""

    exit_code = 1


class ConfigError(G2PnPError, ValueError):
    """Invalid configuration value, unknown key or out-of-range layer index."""

    exit_code = 2


class InputError(G2PnPError, ValueError):
    """Caller supplied inconsistent inputs (count mismatch, unknown symbol)."""

    exit_code = 3


class DatasetError(G2PnPError, ValueError):
    """Malformed or unsupported dataset / checkpoint file."""

    exit_code = 3


class DimensionError(G2PnPError, ValueError):
    """Tensor or mask shapes do not line up."""

    exit_code = 5


class ContractError(G2PnPError, ValueError):
    """A numerical precondition was violated (e.g. a fully masked softmax row)."""

    exit_code = 5


class StreamStateError(G2PnPError, RuntimeError):
    """Operation not allowed in the current stream state."""

    exit_code = 4


class TrainingDivergedError(G2PnPError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    exit_code = 6
