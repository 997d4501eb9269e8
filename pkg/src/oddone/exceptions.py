"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`OddOneError`,
which is also a :class:`ValueError` so callers using generic validation
handling keep working.
"""


class OddOneError(ValueError):
    """Base class for all package errors."""


class EmptyClassSet(OddOneError):
    pass


class MissingAssignment(OddOneError):
    pass


class UnknownClassId(OddOneError, KeyError):
    pass


class DimensionMismatch(OddOneError):
    pass


class EmptyCalibrationSet(OddOneError):
    pass


class NonFiniteCost(OddOneError):
    pass


class InconsistentMatch(OddOneError):
    pass


class DegenerateBatch(OddOneError):
    pass


class ConfigError(OddOneError):
    pass


class InvalidNoiseParameters(OddOneError):
    pass


class EmptyDataset(OddOneError):
    pass


class DuplicateImageId(OddOneError):
    pass


class UnknownClassInPredictions(OddOneError):
    pass


class ParseError(OddOneError):
    pass


class MissingSupercategory(ParseError):
    pass
