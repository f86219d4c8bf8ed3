"""Exception hierarchy shared across the package.

Each category maps to a CLI exit code so callers can script against
failures without parsing messages.
"""

from __future__ import annotations


class BmcoopError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    category = "internal"


class ConfigError(BmcoopError):
    """Bad run configuration: unknown keys, type mismatches, invalid values."""

    exit_code = 2
    category = "config"


class DataError(BmcoopError):
    """Bad input data: malformed files, unknown classes, missing items."""

    exit_code = 3
    category = "data"


class NumericError(BmcoopError):
    """Numeric failure such as a NaN loss during training.

    ``state`` carries a diagnostic snapshot (epoch, batch, norms) for the
    state dump the CLI writes on abort.
    """

    exit_code = 4
    category = "numeric"

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


class NetworkError(BmcoopError):
    """HTTP/auth/timeout failure while talking to the prompt-generation API."""

    exit_code = 5
    category = "network"
