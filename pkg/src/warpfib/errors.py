"""Exception types shared across modules; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(ValueError):
    """Input data that cannot be used (empty masks, bad files, missing surfaces)."""


class NumericalFailure(RuntimeError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
