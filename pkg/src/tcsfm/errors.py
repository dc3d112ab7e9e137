"""Exception types raised across the pipeline."""


class TcsfmError(Exception):
    """Base class for all pipeline errors."""


class NonPositiveDepth(TcsfmError):
    """Point is behind (or on) the camera plane."""


class ZeroVector(TcsfmError):
    """A direction vector has (near-)zero norm."""


class IndexOutOfRange(TcsfmError):
    """A match references a keypoint or view that does not exist."""


class EmptyGraph(TcsfmError):
    """Graph operation on a graph with no edges."""


class UnknownTrack(TcsfmError):
    """Track id is not a node of the track-graph."""


class DegenerateGeometry(TcsfmError):
    """Two-view geometry is degenerate (no parallax / planar collapse)."""


class TooFewInliers(TcsfmError):
    """RANSAC found fewer inliers than required for registration."""


class LowParallax(TcsfmError):
    """Triangulation rays are too close to parallel."""


class CheiralityViolation(TcsfmError):
    """Triangulated point has non-positive depth in an observing camera."""


class HighResidual(TcsfmError):
    """Triangulated point exceeds the reprojection error bound."""


class NoCrossPairs(TcsfmError):
    """No cross-model camera pairs available for alignment."""


class SingularSystem(TcsfmError):
    """Linear system for scale/translation is rank deficient."""


class DisconnectedModels(TcsfmError):
    """Alignment graph is not connected; carries the components."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"alignment graph has {len(components)} components")


class InitializationFailed(TcsfmError):
    """No view pair produced a valid two-view model."""


class InsufficientAuxiliary(TcsfmError):
    """Too few auxiliary 2D-3D matches to verify a candidate view."""


class TooFewCommonViews(TcsfmError):
    """Not enough views shared with ground truth for evaluation."""


class InvalidSpec(TcsfmError):
    """Synthetic scene specification is inconsistent."""


class IoError(TcsfmError):
    """A file could not be read, parsed, or written."""


class StageFailed(TcsfmError):
    """A pipeline stage failed; carries the stage name and cause."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
