"""Exception types shared across the solver stack."""

__all__ = [
    "GranstError",
    "ConfigurationError",
    "MeshError",
    "ConvergenceError",
]


class GranstError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GranstError):
    """Invalid configuration input. May carry a list of individual errors."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class MeshError(GranstError):
    """Invalid or inconsistent mesh data."""


class ConvergenceError(GranstError):
    """Linear or nonlinear iteration failed to reach its tolerance."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history if history is not None else []
