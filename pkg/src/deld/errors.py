"""Exception types shared across the package."""


class DeldError(Exception):
    """Base class for all package errors."""


class DimensionError(DeldError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(DeldError):
    """A configuration value violates its domain."""


class ContractError(DeldError):
    """A caller broke an operation's precondition."""


class CapacityError(DeldError):
    """A sequence exceeds the encoder's positional capacity."""


class ParseError(DeldError):
    """An input file is syntactically malformed."""


class ValidationError(DeldError):
    """An input file is well-formed but semantically invalid."""


class TransportError(DeldError):
    """A remote call failed after exhausting retries."""


class StatusError(DeldError):
    """A remote endpoint answered with a non-2xx status."""
