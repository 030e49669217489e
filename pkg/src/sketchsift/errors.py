"""Exception types shared across the package."""


class SketchSiftError(Exception):
    """Base class for all package errors."""


class MalformedDocument(SketchSiftError):
    pass


class EmptySketch(SketchSiftError):
    pass


class OutOfCanvas(SketchSiftError):
    pass


class LengthMismatch(SketchSiftError):
    pass


class EmptySubset(SketchSiftError):
    pass


class ShapeMismatch(SketchSiftError):
    pass


class NumericError(SketchSiftError):
    pass


class NotScalar(SketchSiftError):
    pass


class DatasetTooSmall(SketchSiftError):
    pass


class CorruptCheckpoint(SketchSiftError):
    pass


class EmptyGallery(SketchSiftError):
    pass


class UnknownPairedId(SketchSiftError):
    pass


class EmptyEpisode(SketchSiftError):
    pass


class EmptyBatch(SketchSiftError):
    pass


class TooManyStrokes(SketchSiftError):
    pass


class InvalidFractions(SketchSiftError):
    pass


class UsageError(SketchSiftError):
    pass


class MissingArtifact(SketchSiftError):
    pass
