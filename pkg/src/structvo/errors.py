"""Exception hierarchy. CLI exit codes map onto these categories."""


class StructVOError(Exception):
    """Base class for all library errors."""


class ConfigError(StructVOError):
    """Bad or unknown configuration (exit code 2)."""


class TrackFileError(StructVOError):
    """Malformed or unreadable input/output file (exit code 3)."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class TrackingLostError(StructVOError):
    """Tracking could not be sustained (exit code 4). Carries the motion-model pose."""

    def __init__(self, message, predicted_pose=None):
        super().__init__(message)
        self.predicted_pose = predicted_pose


class NumericalError(StructVOError):
    """Numerical failure: non-finite values, degenerate geometry (exit code 5)."""


class DomainError(NumericalError):
    """Input outside an operation's domain (e.g. non-positive depth)."""


class DegenerateSegmentError(NumericalError):
    """Segment endpoints coincide; no direction can be derived."""


class DegenerateAxesError(NumericalError):
    """Axis triad is rank-deficient; no rotation can be recovered."""


class InsufficientOverlapError(NumericalError):
    """Too few associated poses to align/evaluate two trajectories."""
