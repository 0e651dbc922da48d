"""Exception types raised across the package."""


class GeoAdvError(Exception):
    """Base class for all package errors."""


class InsufficientPoints(GeoAdvError, ValueError):
    pass


class InvalidCount(GeoAdvError, ValueError):
    pass


class InvalidRatio(GeoAdvError, ValueError):
    pass


class EmptyMesh(GeoAdvError, ValueError):
    pass


class EmptyCloud(GeoAdvError, ValueError):
    pass


class MismatchedK(GeoAdvError, ValueError):
    pass


class SizeMismatch(GeoAdvError, ValueError):
    pass


class InvalidClass(GeoAdvError, ValueError):
    pass


class StateMismatch(GeoAdvError, ValueError):
    pass


class DegenerateDataset(GeoAdvError, ValueError):
    pass


class FormatVersionMismatch(GeoAdvError, IOError):
    pass


class InvalidSpec(GeoAdvError, ValueError):
    pass


class EmptyResults(GeoAdvError, ValueError):
    pass


class ParseError(GeoAdvError, ValueError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelIOError(GeoAdvError, IOError):
    """Model file unreadable, truncated, or failing its checksum."""
