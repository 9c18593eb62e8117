"""Exception hierarchy shared by every module."""


class MDKVError(Exception):
    """Base class for all errors raised by mdkv."""


class ContractViolation(MDKVError, ValueError):
    """An input violates the documented shape or value contract."""


class NumericalError(MDKVError, ArithmeticError):
    """An iterative kernel failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DataIntegrityError(MDKVError):
    """Stored cache data is internally inconsistent."""


class FormatError(MDKVError):
    """A serialized cache is malformed; ``offset`` locates the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigurationError(MDKVError, ValueError):
    """A run configuration (budget, head quotas, ratios) cannot be satisfied."""


class InstanceTooLarge(MDKVError):
    """The exhaustive oracle refuses instances with too many assignments."""
