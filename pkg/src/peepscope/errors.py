"""Exception hierarchy.

Each family maps onto a CLI exit code so scripts can tell a bad config from a
numerical failure or a broken artifact.
"""

from __future__ import annotations


class PeepscopeError(Exception):
    exit_code = 1


class ConfigError(PeepscopeError, ValueError):
    """Invalid configuration, parameter, or precondition."""

    exit_code = 2


class NumericError(PeepscopeError, ArithmeticError):
    """Divergence, singular matrices, non-finite values."""

    exit_code = 3


class ArtifactError(PeepscopeError, OSError):
    """Unreadable, malformed, or mismatched files."""

    exit_code = 4


class ParseError(ArtifactError):
    def __init__(self, path, line: int, message: str) -> None:
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
