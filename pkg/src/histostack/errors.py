"""Exception hierarchy.

Data errors map to CLI exit status 2, solver stalls to 3.
"""

from __future__ import annotations


class HistostackError(Exception):
    """Base class for all package errors."""


class DataError(HistostackError):
    """Invalid input data (geometry, kinds, files)."""


class InterpolationOnLabelsError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class FrameMismatchError(DataError):
    """Template and section stack do not share a physical frame."""


class NonDiffeomorphicError(HistostackError):
    """A deformation with non-positive Jacobian determinant was produced."""


class InstabilityError(HistostackError):
    """Geodesic integration diverged."""


class DegenerateImageError(DataError):
    pass


class ParseError(DataError):
    """File parse failure; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}" if loc else f"line {line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.line = line
        self.path = path


class ManifestError(DataError):
    pass


class MissingFileError(ManifestError):
    pass


class NonIncreasingZError(ManifestError):
    def __init__(self, index: int, message: str | None = None):
        super().__init__(message or f"z position at index {index} is not strictly increasing")
        self.index = index


class ConfigError(DataError):
    pass


class SolverStall(HistostackError):
    """No descent step could be accepted; ``trace`` holds the energy history."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
