"""Exception hierarchy shared by every stage.

Each class carries the process exit code the CLI maps it to.
"""


class IlluError(Exception):
    exit_code = 3


class ConfigError(IlluError, ValueError):
    """Bad flags, bad policy strings, precondition violations on settings."""

    exit_code = 2


class ShapeError(IlluError, ValueError):
    """Tensor dimensions that do not line up."""

    exit_code = 3


class DataError(IlluError):
    """Missing, unreadable or inconsistent input data."""

    exit_code = 3


class FormatError(DataError):
    """A serialized artifact is corrupt, truncated or of an unknown version."""


class NumericError(IlluError, ArithmeticError):
    """Training produced a non-finite loss."""

    exit_code = 4
