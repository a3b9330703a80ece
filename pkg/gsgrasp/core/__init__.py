"""Core infrastructure components."""
from .cache import ArtifactCache
from .exceptions import (
    AppException,
    BadIntrinsicsError,
    DegenerateContactsError,
    DegenerateInputError,
    DivergenceDetectedError,
    EmptyQueryResultError,
    InvariantViolationError,
    MissingFileError,
    MissingTargetFeatureError,
    NoFeasibleGraspError,
    NoMasksError,
    NoNearbySurfaceError,
    NotFoundError,
    NoValidDepthError,
    NoValidNeighborhoodError,
    NoValidPixelsError,
    NumericalDegeneracyError,
    ParseError,
    ShapeMismatchError,
    ValidationError,
)

__all__ = [
    "AppException",
    "ArtifactCache",
    "BadIntrinsicsError",
    "DegenerateContactsError",
    "DegenerateInputError",
    "DivergenceDetectedError",
    "EmptyQueryResultError",
    "InvariantViolationError",
    "MissingFileError",
    "MissingTargetFeatureError",
    "NoFeasibleGraspError",
    "NoMasksError",
    "NoNearbySurfaceError",
    "NotFoundError",
    "NoValidDepthError",
    "NoValidNeighborhoodError",
    "NoValidPixelsError",
    "NumericalDegeneracyError",
    "ParseError",
    "ShapeMismatchError",
    "ValidationError",
]
