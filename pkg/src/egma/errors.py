"""Exception hierarchy shared across the package.

Data problems derive from :class:`DataError` and numeric failures from
:class:`NumericError`; the CLI maps those two families onto exit codes 2 and 3.
"""


class EgmaError(Exception):
    pass


class DataError(EgmaError):
    """Input data that violates a format or invariant."""


class NumericError(EgmaError):
    """A computation produced a non-finite or otherwise unusable result."""


class MalformedRow(DataError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {reason}")


class NonMonotonicTime(DataError):
    pass


class EmptyTranscript(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class UnknownToken(DataError):
    pass


class EmptySentence(DataError):
    pass


class EmptyBank(DataError):
    pass


class GalleryTooSmall(DataError):
    pass


class ConfigError(EgmaError):
    """Bad configuration key or value (CLI exit code 1)."""


class ZeroVector(NumericError):
    pass


class NonPositiveTemperature(NumericError):
    pass


class NonFiniteFunction(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
