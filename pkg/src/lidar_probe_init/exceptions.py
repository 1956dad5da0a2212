# lidar-probe-init/src/lidar_probe_init/exceptions.py
"""
Custom exceptions for the probe pose initialization toolkit.

Every error raised on purpose by the pipeline derives from ProbeInitError.
The ``exit_code`` class attribute is what the command-line entry point
returns when the exception escapes a stage:

    2: invalid input or configuration
    3: degenerate calibration data
    4: registration failure
    5: internal or numerical failure
"""


class ProbeInitError(Exception):
    """Base class for exceptions in this toolkit."""

    exit_code: int = 5


class RejectedInputError(ProbeInitError):
    """Raised when an input value violates an operation's precondition."""

    exit_code = 2


class InvalidConfigurationError(RejectedInputError):
    """Raised when a configuration file or object is malformed."""


class FrameError(RejectedInputError):
    """Raised when transforms or points are chained across mismatched frames."""


class OutOfRangeError(RejectedInputError):
    """Raised when a pose is requested outside a trajectory's time span."""


class NotEnoughDataError(RejectedInputError):
    """Raised when a scan has fewer valid samples than a fit requires."""


class TooFewPointsError(RejectedInputError):
    """Raised when a cloud is too small for a neighborhood operation."""


class MissingNormalsError(RejectedInputError):
    """Raised when an operation needs per-point normals and none are present."""


class EmptyReconstructionError(RejectedInputError):
    """Raised when a reconstruction stage produces no points."""


class DegenerateScanError(ProbeInitError):
    """Raised when RANSAC finds no line with enough inliers."""

    exit_code = 3


class DegeneracyError(ProbeInitError):
    """Raised when the calibration pose set cannot constrain the extrinsics."""

    exit_code = 3


class DivergenceError(ProbeInitError):
    """Raised when the calibration solver increases its cost."""


class SolverError(ProbeInitError):
    """Raised when an iterative linear solve does not converge."""


class RegistrationFailureError(ProbeInitError):
    """Raised when a registration step cannot produce an alignment."""

    exit_code = 4


class NoMatchError(RegistrationFailureError):
    """Raised when every template scale variant failed to register."""
