"""Exception types shared across the package.

The CLI maps these onto exit codes: config 2, data 3, numerical 4.
"""


class InvalidInputError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigError(Exception):
    """Configuration file missing, malformed, or out of documented ranges."""


class DataError(Exception):
    """Dataset files missing, unreadable, or inconsistent with their manifest."""


class NumericalError(Exception):
    """An optimization produced non-finite values or failed to make progress."""
