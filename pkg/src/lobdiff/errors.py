"""Exception hierarchy shared across the package."""


class LobDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(LobDiffError):
    """Invalid configuration value or combination."""


class DataError(LobDiffError):
    """Input data violates a documented precondition or invariant."""


class ParseError(DataError):
    """Malformed input file; message carries the offending row when known."""


class NumericalError(LobDiffError):
    """Non-finite loss or other numerical breakdown; message carries diagnostics."""
