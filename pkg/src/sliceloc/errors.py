"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors exit 2, data errors 3,
numeric errors 4.
"""


class SlicelocError(Exception):
    """Base class for all package-specific errors."""


class UsageError(SlicelocError):
    """Invalid arguments or configuration supplied by the caller."""


class DataError(SlicelocError):
    """Input files or values that violate a format or invariant."""


class NumericError(SlicelocError):
    """A computation produced non-finite or otherwise unusable numbers."""


class DegenerateLabelError(DataError):
    """Three-point label whose points are collinear or coincident."""


class StageError(SlicelocError):
    """Failure inside one stage of the positioning pipeline.

    Wraps the underlying exception and labels which stage raised it.
    """

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
