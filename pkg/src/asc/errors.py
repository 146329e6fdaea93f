"""Exception types shared across the package."""


class ASCError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ASCError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ASCError, ValueError):
    """A precondition or structural invariant was violated."""


class ConfigError(ASCError, ValueError):
    """A configuration value is invalid or unknown."""


class CapacityError(ASCError, ValueError):
    """A request exceeds a fixed table size."""
