"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code so batch operators can tell
configuration mistakes, bad data, and numerical blowups apart.
"""


class CodecParseError(Exception):
    """Base class; generic failures exit with code 1."""

    exit_code = 1


class ConfigError(CodecParseError):
    """Invalid configuration or model build parameters."""

    exit_code = 2


class UsageError(CodecParseError):
    """API misuse (wrong call sequence, empty batch, detached backward)."""

    exit_code = 2


class DataError(CodecParseError):
    """Malformed or inconsistent dataset input."""

    exit_code = 3


class ShapeError(CodecParseError):
    """Incompatible tensor shapes in an operation."""

    exit_code = 2


class NumericalError(CodecParseError):
    """Non-finite values or degenerate denominators; aborts training."""

    exit_code = 4
