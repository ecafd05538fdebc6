class DetgenError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(DetgenError, ValueError):
    """Invalid configuration, shapes, or preconditions. Fatal before any work starts."""


class TrainingAbort(DetgenError, FloatingPointError):
    """A non-finite value appeared during training or sampling.

    ``diagnostics`` carries whatever the raising site could collect (offending
    parameter name, step index, group dump) for the CLI to persist.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
