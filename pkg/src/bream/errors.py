"""Exception hierarchy; the CLI maps each class to an exit code."""


class BreamError(Exception):
    """Base class for all library errors."""


class ConfigError(BreamError, ValueError):
    """Invalid configuration, dimensions or arguments."""


class DataError(BreamError, ValueError):
    """Unreadable or malformed dataset / cost input."""


class DivergenceError(BreamError, FloatingPointError):
    """A forward pass or gradient produced NaN/Inf.

    ``diagnostics`` carries whatever the raising site knew (gradient norms,
    rollout losses, last finite parameters, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
