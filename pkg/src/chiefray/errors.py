"""Exception types shared across the toolkit.

Every error carries a stable ``code`` string that surfaces in CLI messages
and stage logs, so callers can match on codes instead of class identity.
"""


class ChiefRayError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class BehindProjectorError(ChiefRayError):
    code = "behind-projector"


class DegenerateHomographyError(ChiefRayError):
    code = "degenerate-homography"


class StackMismatchError(ChiefRayError):
    code = "stack-mismatch"


class MissingCodeError(ChiefRayError):
    code = "missing-code"


class EmptyFieldError(ChiefRayError):
    code = "empty-field"


class OverClusteredError(ChiefRayError):
    code = "over-clustered"


class GridNotFoundError(ChiefRayError):
    code = "grid-not-found"


class NotAnEllipseError(ChiefRayError):
    code = "not-an-ellipse"


class DegenerateCircleError(ChiefRayError):
    code = "degenerate-circle"


class OverlappingBlobsError(ChiefRayError):
    code = "overlapping-blobs"


class InsufficientViewError(ChiefRayError):
    code = "insufficient-view"


class ClosedFormFailedError(ChiefRayError):
    code = "closed-form-failed"


class LMFailedError(ChiefRayError):
    code = "lm-failed"


class PnPDegenerateError(ChiefRayError):
    code = "pnp-degenerate"


class BenchValidationError(ChiefRayError):
    code = "bench-invalid"


class PipelineStageError(ChiefRayError):
    """A pipeline stage aborted; ``stage`` names the failing stage."""

    code = "stage-failed"

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
