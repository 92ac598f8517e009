"""Exception types mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class DependencyError(RuntimeError):
    """A prerequisite artifact (checkpoint, phase, file) is missing (exit code 3)."""


class NumericalError(RuntimeError):
    """Training or inference produced non-finite values (exit code 4)."""
