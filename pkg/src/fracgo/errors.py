"""Exception hierarchy shared by every module."""


class FracGOError(Exception):
    """Base class for numerical failures raised by the package."""


class DomainError(FracGOError, ValueError):
    """An argument lies outside the domain of the operation."""


class RegimeError(DomainError):
    """The fractional order lies in a regime the construction does not cover."""


class ResonanceError(FracGOError):
    """The frequency is too close to the discrete torus spectrum.

    Attributes
    ----------
    frequencies : ndarray
        Offending wave vectors, one per row.
    """

    def __init__(self, message, frequencies):
        super().__init__(message)
        self.frequencies = frequencies


class ResolutionError(FracGOError):
    """The grid cannot resolve the requested frequency.

    Attributes
    ----------
    required_sizes : tuple of int
        Smallest power-of-two sizes satisfying the resolution policy.
    """

    def __init__(self, message, required_sizes):
        super().__init__(message)
        self.required_sizes = tuple(required_sizes)


class QuadratureError(FracGOError):
    """Successive quadrature refinements disagree."""

    def __init__(self, message, coarse, fine):
        super().__init__(message)
        self.coarse = coarse
        self.fine = fine


class DegeneratePhaseError(FracGOError):
    """The phase gradient vanishes (or drops below c0) on the domain."""


class CoverageError(FracGOError):
    """Rays from a chart do not reach some cell of the domain."""

    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = cells


class TrappedRayError(FracGOError):
    """A ray did not leave the domain within its parameter budget."""


class SupportError(FracGOError):
    """A field is not decayed where compact support is required."""


class BreakdownError(FracGOError):
    """Conjugate gradient met non-positive curvature."""


class ConfigError(FracGOError, ValueError):
    """An experiment configuration failed validation."""
