"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class ParseError(ValueError):
    """A file on disk does not follow its declared binary format."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
