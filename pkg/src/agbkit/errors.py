"""Exception hierarchy shared by all agbkit modules.

Exit-code mapping used by the CLI: validation problems exit 2, stage
failures exit 3, resource limits exit 4.
"""

from __future__ import annotations


class AgbkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class ValidationError(AgbkitError):
    """Bad input: malformed file, out-of-range parameter, missing path."""

    exit_code = 2


class ParseError(ValidationError):
    """A file failed to parse. Carries the 1-based line (or byte offset)."""

    def __init__(self, message: str, *, path: str | None = None,
                 line: int | None = None, offset: int | None = None):
        loc = ""
        if path is not None:
            loc += f" in {path}"
        if line is not None:
            loc += f" at line {line}"
        if offset is not None:
            loc += f" at byte {offset}"
        super().__init__(message + loc)
        self.path = path
        self.line = line
        self.offset = offset


class EmptyCloudError(ValidationError):
    """A point cloud with zero points where at least one is required."""


class ResourceLimitError(AgbkitError):
    """A requested computation exceeds a configured resource budget."""

    exit_code = 4


class DegenerateInputError(AgbkitError):
    """Input is structurally unusable (zero-mass signal, dims < 2, ...)."""


class NoConsensusError(AgbkitError):
    """The robust spectral fit found too few inliers; signals too dissimilar."""

    def __init__(self, message: str, inlier_fraction: float):
        super().__init__(message)
        self.inlier_fraction = inlier_fraction


class PairingFailureError(AgbkitError):
    """ICP found zero valid pairs. Carries the last transform reached."""

    def __init__(self, message: str, last_transform=None):
        super().__init__(message)
        self.last_transform = last_transform


class InsufficientSeedsError(DegenerateInputError):
    """Ground filtering needs at least 3 seed points."""


class TriangulationError(DegenerateInputError):
    """Point set is collinear or otherwise untriangulable."""


class EmptyOutputError(AgbkitError):
    """An operation produced no output points (e.g. all dropped over nodata)."""


class UndefinedCorrelationError(DegenerateInputError):
    """Correlation undefined because one of the samples has zero variance."""


class CollinearityError(AgbkitError):
    """Selected regression columns are linearly dependent."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class MissingPredictorError(ValidationError):
    """A model predictor is absent or undefined in the supplied metrics."""


class StageError(AgbkitError):
    """A pipeline stage failed. Carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
