"""Exception types raised across the package."""


class DeUNetError(Exception):
    pass


class DimensionError(DeUNetError, ValueError):
    pass


class ConfigurationError(DeUNetError, ValueError):
    pass


class StateError(DeUNetError, RuntimeError):
    pass


class DataError(DeUNetError, ValueError):
    pass


class ParseError(DeUNetError, ValueError):
    """Malformed archive or checkpoint bytes."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GradientCheckError(DeUNetError, ArithmeticError):
    pass


class TrainingDiverged(DeUNetError, ArithmeticError):
    pass
