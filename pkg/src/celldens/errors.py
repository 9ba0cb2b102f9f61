"""Shared exception and warning types."""


class CellDensError(Exception):
    """Base class for celldens errors."""


class IntegrationError(CellDensError):
    """Adaptive ODE integration failed (step underflow or non-finite state)."""


class DensityError(CellDensError):
    """A Gaussian mixture operation failed (bad covariance, bad component)."""


class FitError(CellDensError):
    """EM fitting failed on every restart."""


class ConfigError(CellDensError):
    """Invalid experiment configuration."""


class DegenerateClusterWarning(UserWarning):
    """An EM cluster collapsed below the identifiable point count."""


class BoundaryFluxWarning(UserWarning):
    """Velocity points outward at a grid boundary; the flux is clamped to zero."""


class LikelihoodUnderflowWarning(UserWarning):
    """Every candidate likelihood underflowed; proportions reset to uniform."""
