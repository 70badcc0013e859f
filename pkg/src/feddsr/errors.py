"""Exception hierarchy shared by every module."""


class FedDSRError(Exception):
    pass


class DimensionError(FedDSRError, ValueError):
    """Tensor extents do not fit the operation."""


class ContractError(FedDSRError, ValueError):
    """A precondition of a call was violated."""


class ConfigError(FedDSRError, ValueError):
    """Invalid configuration; the message names the offending field."""


class DataError(FedDSRError, ValueError):
    pass


class FormatError(FedDSRError, ValueError):
    """Corrupt or truncated file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class ProtocolError(FedDSRError, ValueError):
    """A vehicle upload does not match the global model."""


class NonFiniteError(FedDSRError, ArithmeticError):
    pass
