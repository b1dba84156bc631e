"""Exception types shared across the package."""


class MagtomoError(Exception):
    """Base class for all magtomo errors."""


class SingularMetric(MagtomoError):
    """Metric matrix is numerically singular (eigenvalue below threshold)."""


class NotOnBoundary(MagtomoError):
    """Point is not on the boundary within tolerance."""


class LeftChart(MagtomoError):
    """Trajectory left the chart bounding box."""


class StepUnderflow(MagtomoError):
    """Adaptive step controller demanded a step below the minimum."""


class TrappedPath(MagtomoError):
    """Geodesic path is flagged trapped; operation requires boundary exits."""


class TrappedOrbit(MagtomoError):
    """Forward orbit failed to exit the domain within the time budget."""


class EmptyFamily(MagtomoError):
    """No geodesic sample passed the containment test."""


class DegenerateLevel(MagtomoError):
    """|grad tau| vanished on a sampled level set."""


class ConjugationOverflow(MagtomoError):
    """Exponential conjugation weight F/x exceeds the safe exponent range."""


class NonConvergence(MagtomoError):
    """Iterative solver failed to reach the requested residual."""


class NotFound(MagtomoError):
    """Search exhausted its range without locating the target."""


class LayerFailure(MagtomoError):
    """Layer-stripping failed at a level; diagnostic attached."""

    def __init__(self, level, diagnostics):
        super().__init__(f"layer inversion failed at level {level}")
        self.level = level
        self.diagnostics = diagnostics
