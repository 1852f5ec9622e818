"""Exception hierarchy.

Every error raised for bad data or bad arguments derives from
:class:`DetectorError`, so callers (and the CLI) can separate data problems
from programming bugs with a single ``except`` clause.
"""

from __future__ import annotations


class DetectorError(ValueError):
    """Base class for all data / argument errors raised by this package."""


class DimMismatch(DetectorError):
    pass


class NonSymmetric(DetectorError):
    pass


class NotFactorizable(DetectorError):
    pass


class MissingLabels(DetectorError):
    pass


class EmptyClass(DetectorError):
    pass


class DegenerateDim(DetectorError):
    pass


class BadLambda(DetectorError):
    pass


class UnsupportedComposition(DetectorError):
    pass


class ShapeMismatch(DetectorError):
    pass


class EmptySet(DetectorError):
    pass


class SingleClass(DetectorError):
    pass


class EmptyReference(DetectorError):
    pass


class TooFewNeighbors(DetectorError):
    pass


class DegenerateEstimate(DetectorError):
    pass


class DuplicatePointWarning(UserWarning):
    """Zero-distance neighbours were dropped from a LID estimate."""


class NonConvergence(DetectorError):
    pass


class TooFewSamples(DetectorError):
    pass


class FeatureFileError(DetectorError):
    """Malformed feature file; ``offset`` / ``line`` locate the problem."""

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        where = ""
        if offset is not None:
            where = f" (byte offset {offset})"
        elif line is not None:
            where = f" (line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class BadMagic(FeatureFileError):
    pass


class TruncatedFile(FeatureFileError):
    pass


class BadDtype(FeatureFileError):
    pass


class RaggedCsv(FeatureFileError):
    pass


class ConfigError(DetectorError):
    pass
