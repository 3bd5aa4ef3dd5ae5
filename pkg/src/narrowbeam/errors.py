"""Exception hierarchy shared by all narrowbeam modules."""


class NarrowBeamError(Exception):
    """Base class for every error raised by this package."""


class SouthPoleError(NarrowBeamError, ValueError):
    """Stereographic chart evaluated at (or numerically at) the south pole."""


class DegenerateDepthError(NarrowBeamError, ValueError):
    """Pencil-beam quantity requested at a depth where the kernel is a delta."""


class QuadratureFailure(NarrowBeamError, RuntimeError):
    """An adaptive quadrature did not reach its requested tolerance."""


class NoExitError(NarrowBeamError, ValueError):
    """Backward ray never meets the boundary (direction not incoming)."""


class StepTooLargeError(NarrowBeamError, ValueError):
    """Angular diffusion step outside the small-angle regime."""


class EmptyWindowError(NarrowBeamError, ValueError):
    """No atoms fall inside the requested depth window."""


class SourceSupportError(NarrowBeamError, ValueError):
    """Boundary source atom violates the narrow-cone condition |theta - N| < C eps^2."""


class SolverFailure(NarrowBeamError, RuntimeError):
    """LP or flow solver did not return an optimal certified solution."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SupportTooLarge(NarrowBeamError, ValueError):
    """More occupied support points than the exact LP accepts."""


class NonConvergent(NarrowBeamError, RuntimeError):
    """Successive refinements of an integral disagree beyond tolerance."""

    def __init__(self, message, values=None):
        super().__init__(message)
        self.values = values


class InsufficientPoints(NarrowBeamError, ValueError):
    """Too few usable points for a scaling fit."""


class ConfigError(NarrowBeamError, ValueError):
    """Invalid experiment or simulation configuration."""
