"""Exception hierarchy shared by every clab module."""


class ClabError(Exception):
    """Base class for all errors raised by clab."""


class ContractError(ClabError, ValueError):
    """An input violates an operation's preconditions (shapes, ranges, norms)."""


class ConfigError(ClabError, ValueError):
    """A configuration value is invalid.

    ``field`` names the offending entry so that the CLI can report it.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NumericError(ClabError, ArithmeticError):
    """A NaN or infinity appeared in a forward or backward pass."""


class UsageError(ClabError, RuntimeError):
    """An API was called in the wrong order or on the wrong object."""


class DataError(ClabError, ValueError):
    """Dataset ingestion failed (bad CSV row, missing file, size mismatch)."""
