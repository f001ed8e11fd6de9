"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid profile, architecture or setting."""


class RangeError(ValueError):
    """A size argument falls outside the supported range."""


class UsageError(RuntimeError):
    """An operation was called in a state it does not support."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
