"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``jomold.cli``).
"""


class JomoldError(Exception):
    """Base class for all package errors."""


class DimensionError(JomoldError, ValueError):
    """Array shapes do not line up."""


class NumericError(JomoldError, ArithmeticError):
    """A non-finite value appeared or a quantity could not be normalized."""


class ConfigError(JomoldError, ValueError):
    """An experiment or generator configuration is invalid.

    ``key`` names the offending setting when known, so file loaders can point
    at its line.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class FormatError(JomoldError, ValueError):
    """A dataset, checkpoint or CSV file is malformed."""
