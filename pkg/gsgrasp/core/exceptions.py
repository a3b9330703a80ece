"""
Custom exception hierarchy for centralized error handling.
Every error carries a machine-readable code; the CLI prints it as a single
JSON line and the HTTP surface maps it to a status code.
"""
from typing import Any, Dict, Optional


class AppException(Exception):
    """Base exception for all engine errors."""

    exit_code: int = 1

    def __init__(
        self,
        message: str,
        status_code: int = 500,
        error_code: str = "INTERNAL_ERROR",
        details: Optional[Dict[str, Any]] = None,
    ) -> None:
        self.message = message
        self.status_code = status_code
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """Convert exception to the error payload format."""
        return {
            "error": {
                "code": self.error_code,
                "message": self.message,
                "details": self.details,
            }
        }


class ValidationError(AppException):
    """Invalid input data or configuration."""

    exit_code = 2

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(
            message=message,
            status_code=400,
            error_code="VALIDATION_ERROR",
            details=details,
        )


class NotFoundError(AppException):
    """Named resource not found (query name, view id)."""

    def __init__(self, resource: str, identifier: str) -> None:
        super().__init__(
            message=f"{resource} not found: {identifier}",
            status_code=404,
            error_code="NOT_FOUND",
            details={"resource": resource, "identifier": identifier},
        )


# =============================================================================
# Field / camera errors
# =============================================================================


class NoValidDepthError(AppException):
    """Every depth pixel of the input is invalid."""

    def __init__(self, source: str = "views") -> None:
        super().__init__(
            message=f"No valid depth pixels in {source}",
            status_code=422,
            error_code="NO_VALID_DEPTH",
            details={"source": source},
        )


class BadIntrinsicsError(AppException):
    """Focal lengths must be positive."""

    def __init__(self, fx: float, fy: float) -> None:
        super().__init__(
            message=f"Bad intrinsics: fx={fx}, fy={fy}",
            status_code=422,
            error_code="BAD_INTRINSICS",
            details={"fx": fx, "fy": fy},
        )


class NumericalDegeneracyError(AppException):
    """2D covariance determinant below the degeneracy floor."""

    def __init__(self, count: int) -> None:
        super().__init__(
            message=f"{count} primitive(s) with degenerate 2D covariance",
            status_code=422,
            error_code="NUMERICAL_DEGENERACY",
            details={"count": count},
        )


class ShapeMismatchError(AppException):
    """Gradient or map resolution does not match the view."""

    def __init__(self, name: str, expected: Any, actual: Any) -> None:
        super().__init__(
            message=f"Shape mismatch for {name}: expected {expected}, got {actual}",
            status_code=422,
            error_code="SHAPE_MISMATCH",
            details={"name": name, "expected": str(expected), "actual": str(actual)},
        )


# =============================================================================
# Training / EFD errors
# =============================================================================


class NoValidPixelsError(AppException):
    """Loss has no valid pixels to average over."""

    def __init__(self, loss: str) -> None:
        super().__init__(
            message=f"No valid pixels for {loss} loss",
            status_code=422,
            error_code="NO_VALID_PIXELS",
            details={"loss": loss},
        )


class DivergenceDetectedError(AppException):
    """Total loss became non-finite; carries the last good state."""

    def __init__(
        self,
        iteration: int,
        last_good_field: Any = None,
        last_good_decoder: Any = None,
    ) -> None:
        super().__init__(
            message=f"Training diverged at iteration {iteration}",
            status_code=500,
            error_code="DIVERGENCE_DETECTED",
            details={"iteration": iteration},
        )
        self.last_good_field = last_good_field
        self.last_good_decoder = last_good_decoder


class NoMasksError(AppException):
    """No mask is large enough for pair sampling."""

    def __init__(self, view_id: str = "") -> None:
        super().__init__(
            message=f"No mask with at least 2 pixels in view {view_id!r}",
            status_code=422,
            error_code="NO_MASKS",
            details={"view_id": view_id},
        )


class MissingTargetFeatureError(AppException):
    """A sampled mask id has no embedding vector."""

    def __init__(self, mask_id: int) -> None:
        super().__init__(
            message=f"No target feature for mask id {mask_id}",
            status_code=422,
            error_code="MISSING_TARGET_FEATURE",
            details={"mask_id": mask_id},
        )


# =============================================================================
# Query / geometry / grasp errors
# =============================================================================


class EmptyQueryResultError(AppException):
    """No pixel of any view passed the relevance threshold."""

    def __init__(self, query: str, threshold: float) -> None:
        super().__init__(
            message=f"No pixel passed threshold {threshold} for query {query!r}",
            status_code=404,
            error_code="EMPTY_QUERY_RESULT",
            details={"query": query, "threshold": threshold},
        )


class NoValidNeighborhoodError(AppException):
    """No pixel has a fully valid 3x3 depth neighborhood."""

    def __init__(self) -> None:
        super().__init__(
            message="No pixel with a valid 3x3 depth neighborhood",
            status_code=422,
            error_code="NO_VALID_NEIGHBORHOOD",
        )


class DegenerateInputError(AppException):
    """Point set is coplanar, collinear or too small for a 3D hull."""

    def __init__(self, reason: str) -> None:
        super().__init__(
            message=f"Degenerate hull input: {reason}",
            status_code=422,
            error_code="DEGENERATE_INPUT",
            details={"reason": reason},
        )


class NoNearbySurfaceError(AppException):
    """No cloud point within the normal lookup radius of a contact."""

    def __init__(self, contact_index: int, radius: float) -> None:
        super().__init__(
            message=f"No surface within {radius} m of contact {contact_index}",
            status_code=422,
            error_code="NO_NEARBY_SURFACE",
            details={"contact": contact_index, "radius": radius},
        )


class DegenerateContactsError(AppException):
    """Contacts coincide, grasping line undefined."""

    def __init__(self, distance: float) -> None:
        super().__init__(
            message=f"Contacts are {distance:.3g} m apart",
            status_code=422,
            error_code="DEGENERATE_CONTACTS",
            details={"distance": distance},
        )


class NoFeasibleGraspError(AppException):
    """Every proposal was filtered out."""

    def __init__(self, total: int) -> None:
        super().__init__(
            message=f"No feasible grasp among {total} proposal(s)",
            status_code=404,
            error_code="NO_FEASIBLE_GRASP",
            details={"total": total},
        )


# =============================================================================
# Dataset IO errors
# =============================================================================


class ParseError(AppException):
    """File exists but cannot be parsed."""

    exit_code = 2

    def __init__(self, path: str, reason: str, field: Optional[str] = None) -> None:
        super().__init__(
            message=f"Cannot parse {path}: {reason}",
            status_code=400,
            error_code="PARSE_ERROR",
            details={"file": path, "field": field, "reason": reason},
        )


class MissingFileError(AppException):
    """Referenced file does not exist."""

    def __init__(self, path: str, field: Optional[str] = None) -> None:
        super().__init__(
            message=f"Missing file: {path}",
            status_code=404,
            error_code="MISSING_FILE",
            details={"file": path, "field": field},
        )


class InvariantViolationError(AppException):
    """Loaded data violates a type invariant."""

    def __init__(self, path: str, field: str, reason: str) -> None:
        super().__init__(
            message=f"Invariant violated in {path} ({field}): {reason}",
            status_code=422,
            error_code="INVARIANT_VIOLATION",
            details={"file": path, "field": field, "reason": reason},
        )
