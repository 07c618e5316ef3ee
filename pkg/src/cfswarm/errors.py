"""Error taxonomy shared across the package.

Contract errors cover misuse of an API (wrong shapes, bad config, missing
state); numeric errors cover values leaving their documented domain.  The
CLI maps the former to exit code 1 and the latter to exit code 2.
"""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class DimensionError(ContractError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigError(ContractError):
    """A configuration file or value is malformed or inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced or received out-of-domain values."""


class DomainError(NumericError):
    """An operand lies outside the operation's documented domain."""
