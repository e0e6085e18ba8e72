"""Exception types raised across the package."""


class LevySPDEError(Exception):
    """Base class for all package errors."""


class QuadratureError(LevySPDEError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class IntegrityError(LevySPDEError):
    """Cached or derived data disagrees with what it was derived from."""


class MartingalizationError(LevySPDEError):
    """Large jumps have a divergent first moment, so no compensator exists."""


class GridMismatchError(LevySPDEError, ValueError):
    """Two fields living on different torus grids were combined."""


class HypothesisViolation(LevySPDEError):
    """A structural hypothesis on the coefficients does not hold."""


class SolverError(LevySPDEError):
    """Time stepping failed (inner solve did not converge, or NaN/Inf appeared)."""

    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class ContractionError(SolverError):
    """A fixed-point iteration stopped contracting."""


class ConfigError(LevySPDEError, ValueError):
    """Experiment configuration is malformed or inconsistent."""
