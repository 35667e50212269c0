"""Exception hierarchy shared by the engine and the command layer."""
from typing import Optional


class NonlocalError(Exception):
    """Base class for every error raised by nlsurf."""

    pass


class QuadratureError(NonlocalError):
    """Exception raised when an adaptive quadrature misses its tolerance.

    Attributes:
        best_estimate: Value reached before giving up.
        error_estimate: Error estimate attached to that value.
    """

    def __init__(
        self,
        message: str,
        best_estimate: Optional[float] = None,
        error_estimate: Optional[float] = None,
    ):
        super().__init__(message)
        self.best_estimate = best_estimate
        self.error_estimate = error_estimate


class TailBoundError(QuadratureError):
    """Exception raised when the truncated tail exceeds the tolerance."""

    pass


class MissingGradientError(NonlocalError):
    """Exception raised when a gradient is needed but the field has none."""

    pass


class KernelError(NonlocalError):
    """Exception raised for invalid kernel parameters."""

    pass


class GeometryError(NonlocalError):
    """Exception raised for invalid lattices, boxes and windows."""

    pass


class OverlapError(GeometryError):
    """Exception raised when an interaction energy pairs overlapping sets."""

    pass


class BoundaryResolutionError(GeometryError):
    """Exception raised when a point is not on a resolvable boundary."""

    pass


class ContainmentError(GeometryError):
    """Exception raised when the graph containment precondition fails."""

    pass


class SlowDecayError(NonlocalError):
    """Exception raised when the remainder integrand decays too slowly."""

    pass


class DegenerateSampleError(NonlocalError):
    """Exception raised when every sampled difference is below the noise floor."""

    pass


class DerivativeError(NonlocalError):
    """Exception raised when finite-difference derivatives are not trustworthy."""

    pass


class CoverError(NonlocalError):
    """Exception raised when a ball family does not cover the target ball."""

    pass


class SolverError(NonlocalError):
    """Exception raised for singular or ill-conditioned discrete systems."""

    def __init__(self, message: str, condition_estimate: Optional[float] = None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class ConfigError(NonlocalError):
    """Exception raised when a run configuration cannot be used."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line
