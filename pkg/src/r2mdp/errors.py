"""Exception hierarchy shared across the package."""


class R2MdpError(Exception):
    """Base class for all package errors."""


class DimensionError(R2MdpError, ValueError):
    """Array shapes do not agree."""


class DomainError(R2MdpError, ValueError):
    """An argument lies outside the domain of the operation."""


class DivergenceError(R2MdpError, RuntimeError):
    """A fixed-point iteration hit its cap without meeting the tolerance."""

    def __init__(self, message, last_value=None, residual=None):
        super().__init__(message)
        self.last_value = last_value
        self.residual = residual


class SolverError(R2MdpError, RuntimeError):
    """A numeric inner solver failed to converge.

    ``best_value`` carries the best objective value found before giving up.
    """

    def __init__(self, message, best_value=None):
        super().__init__(message)
        self.best_value = best_value


class UnsupportedError(R2MdpError, NotImplementedError):
    """The requested combination of options is not supported."""


class StateError(R2MdpError, RuntimeError):
    """An object was used in a state that does not permit the call."""


class ConfigError(DomainError):
    """An experiment configuration is invalid."""
