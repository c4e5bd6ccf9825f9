"""Exception hierarchy shared across the package."""


class OEChainError(Exception):
    """Base class for all package errors."""


class StructureError(OEChainError):
    """Charge bookkeeping or tensor structure violated."""


class ParameterError(OEChainError):
    """Invalid argument value."""


class CapacityError(ParameterError):
    """Requested system size exceeds what the method can handle."""


class ConfigError(ParameterError):
    """Invalid experiment configuration."""


class DataError(OEChainError):
    """Numerical input violates a documented precondition."""


class FitError(DataError):
    """Insufficient or degenerate data for a fit."""


class NoPeakError(FitError):
    """Series has no local maximum to report."""


class DegenerateStateError(OEChainError):
    """State collapsed below numerical floors (e.g. all Schmidt values ~ 0)."""


class NumericalError(OEChainError):
    """Iterative routine failed to converge.

    The ``residual`` attribute carries the last achieved residual.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
