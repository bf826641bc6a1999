"""Exception hierarchy shared across the package."""


class MarkedLgcpError(Exception):
    """Base class for all package errors."""


class InvalidDomainError(MarkedLgcpError, ValueError):
    pass


class FemAssemblyError(MarkedLgcpError):
    """Raised for degenerate elements; carries the offending triangle index."""

    def __init__(self, triangle: int, message: str):
        super().__init__(message)
        self.triangle = triangle


class NumericalDegeneracyError(MarkedLgcpError):
    """A matrix expected to be positive definite failed to factorize."""

    def __init__(self, message: str, min_pivot: float = float("nan")):
        super().__init__(message)
        self.min_pivot = min_pivot


class NonConvergenceError(MarkedLgcpError):
    """Newton iterations did not converge; ``last_iterate`` holds the final point."""

    def __init__(self, message: str, last_iterate=None, hyper=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.hyper = hyper


class ModelDataError(MarkedLgcpError, ValueError):
    pass


class DesignError(MarkedLgcpError, ValueError):
    pass


class SurfaceError(MarkedLgcpError, ValueError):
    pass
