"""Exception types shared across the calibration and verification pipeline."""


class CalibrationError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(CalibrationError):
    """An argument violates a documented precondition."""


class DegenerateConfiguration(CalibrationError):
    """Point configuration too degenerate for rigid registration."""


class BehindCamera(CalibrationError):
    """Point lies outside the camera's valid field of view."""


class NoConvergence(CalibrationError):
    """Iterative inversion failed; input likely outside the invertible domain."""


class InsufficientCorners(CalibrationError):
    """Fewer detected corners than the operation requires."""


class PlanarDegeneracy(CalibrationError):
    """Detected corners are collinear; planar pose is unobservable."""


class EmptyReferences(CalibrationError):
    """No camera/frame pair admitted a usable pose bootstrap."""


class EmptyDataset(CalibrationError):
    """Dataset contains no usable observations."""


class SingularNormalEquations(CalibrationError):
    """Normal equations are rank deficient; problem is underconstrained."""


class Divergence(CalibrationError):
    """Objective grew far beyond its initial value; setup is inconsistent."""


class DegenerateHomography(CalibrationError):
    """Quad correspondences do not determine a unique homography."""


class EmptyRecording(CalibrationError):
    """Verification recording contains no frames."""


class TooFewReports(CalibrationError):
    """Drift analysis needs at least two reports."""


class InfeasibleTrajectory(CalibrationError):
    """Could not sample a trajectory satisfying the visibility requirement."""


class ParseError(CalibrationError):
    """Input file is malformed."""


class ValidationError(CalibrationError):
    """Input file parsed but violates a dataset invariant."""
