"""Exception types raised across the package."""


class SceneDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(SceneDiffError, ValueError):
    pass


class RangeError(SceneDiffError, ValueError):
    pass


class TrackTooShort(SceneDiffError, ValueError):
    pass


class InvalidState(SceneDiffError, ValueError):
    pass


class ValidationError(SceneDiffError, ValueError):
    pass


class ParseError(SceneDiffError, ValueError):
    """Malformed input file. ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class SpecError(SceneDiffError, ValueError):
    pass


class NonFiniteError(SceneDiffError, FloatingPointError):
    pass


class NonFiniteGradient(NonFiniteError):
    pass


class EmptyOverlap(SceneDiffError, ValueError):
    pass


class BinError(SceneDiffError, ValueError):
    pass


class NoMap(SceneDiffError, ValueError):
    pass


class NoHistory(SceneDiffError, ValueError):
    pass
