"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class CaladError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CaladError):
    """Invalid or conflicting configuration."""

    exit_code = 1


class DataError(CaladError):
    """Unreadable, malformed, or degenerate input data."""

    exit_code = 2


class NumericalError(CaladError):
    """A numerical contract was violated at runtime."""

    exit_code = 3
