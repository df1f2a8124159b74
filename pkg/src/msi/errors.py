"""Exception types shared across the package."""


class MsiError(Exception):
    """Base class for all package errors."""


class ShapeError(MsiError, ValueError):
    pass


class ConfigError(MsiError, ValueError):
    pass


class FormatError(MsiError):
    """Malformed or truncated MSIF/MSCK file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class StateError(MsiError, RuntimeError):
    """Backward called without a matching forward."""


class GradCheckError(MsiError, ArithmeticError):
    def __init__(self, coordinate: int, value: float):
        self.coordinate = coordinate
        self.value = value
        super().__init__(f"non-finite function value {value!r} while perturbing coordinate {coordinate}")
