"""Exception types raised across the package."""


class DualCadError(Exception):
    """Base class for all package errors."""


class InputError(DualCadError, ValueError):
    pass


class GeometryError(DualCadError, ValueError):
    pass


class ParameterError(DualCadError, ValueError):
    pass


class ShapeError(DualCadError, ValueError):
    pass


class DegenerateInputError(DualCadError, ValueError):
    pass


class FormatError(DualCadError, ValueError):
    """Malformed volume file. ``offset`` is the byte offset of the bad field."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RegistrationError(DualCadError, RuntimeError):
    pass


class InsufficientOverlapError(RegistrationError):
    pass


class NumericError(DualCadError, FloatingPointError):
    pass


class ConfigError(DualCadError, ValueError):
    pass


class DegenerateTestError(DualCadError, ValueError):
    pass


class SummaryError(DualCadError, ValueError):
    pass
