"""Exception hierarchy shared by every module."""


class UavSslError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UavSslError, ValueError):
    pass


class NumericError(UavSslError, ArithmeticError):
    pass


class EmptyPoolError(UavSslError, ValueError):
    pass


class FormatError(UavSslError, ValueError):
    pass


class CorruptionError(UavSslError, ValueError):
    pass


class PreconditionError(UavSslError, ValueError):
    pass


class GeometryError(UavSslError, ValueError):
    pass


class ConfigError(UavSslError, ValueError):
    pass


class TooFewTokensError(UavSslError, ValueError):
    pass


class DegenerateEmbeddingError(UavSslError, ValueError):
    pass


class BatchTooSmallError(UavSslError, ValueError):
    pass


class ModalityError(UavSslError, ValueError):
    pass


class ParseError(UavSslError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateSetError(UavSslError, ValueError):
    pass


class DataError(UavSslError, OSError):
    """A dataset sample could not be read; the message names the sample id."""
