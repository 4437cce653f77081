"""Exception types that map onto the CLI exit codes."""


class ConfigError(Exception):
    """Invalid or unparsable configuration (exit code 3)."""


class MissingCheckpointError(Exception):
    """A required upstream checkpoint is absent (exit code 2)."""


class NumericalError(Exception):
    """Non-finite loss or objective encountered (exit code 4)."""
