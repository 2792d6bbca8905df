"""Exception types raised across the package."""


class EpicacheError(Exception):
    """Base class for all package errors."""


class ShapeError(EpicacheError, ValueError):
    pass


class ParameterError(EpicacheError, ValueError):
    pass


class NumericalError(EpicacheError, FloatingPointError):
    """A non-finite value appeared; ``stage`` names where."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"{stage}: {message}")
        self.stage = stage


class TrainingDivergedError(NumericalError):
    pass


class DegenerateQueryError(EpicacheError, ValueError):
    pass


class EmptyClusterError(EpicacheError, RuntimeError):
    pass


class UndefinedCEError(EpicacheError, ZeroDivisionError):
    def __init__(self, corruption):
        super().__init__(f"reference error is zero for corruption {corruption!r}; CE undefined")
        self.corruption = corruption


class ConfigurationError(EpicacheError, ValueError):
    pass


class FormatError(EpicacheError, ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
