"""
Exception hierarchy shared by the segmentation services, the CLI and the job API.
"""

from typing import Optional


class DTSegError(Exception):
    """Base class for all pipeline errors."""


class CubeFormatError(DTSegError):
    """Input video or label map could not be read or violates size/format rules."""


class InvalidParameterError(DTSegError, ValueError):
    """A parameter or precondition is out of its allowed range."""


class DimensionMismatchError(DTSegError, ValueError):
    """Two maps (or a map and a cube) do not share dimensions."""


class EmptyEnsembleError(DTSegError, ValueError):
    """An operation needs at least one ensemble member."""


class UndefinedMetricError(DTSegError, ValueError):
    """A metric is undefined for the given inputs (e.g. no positive pairs)."""


class ConsistencyError(DTSegError):
    """An internal audit failed (incremental state drifted, inertia increased)."""


class StageError(DTSegError):
    """Failure inside one pipeline stage; `stage` names where it happened."""

    def __init__(self, stage: str, cause: Optional[BaseException] = None, message: Optional[str] = None):
        self.stage = stage
        self.cause = cause
        detail = message or (str(cause) if cause is not None else "stage failed")
        super().__init__(f"[{stage}] {detail}")
