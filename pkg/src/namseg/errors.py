"""Exception types shared across the package."""


class NamsegError(Exception):
    """Base class for all namseg errors."""


class DimensionError(NamsegError, ValueError):
    """Operand shapes do not agree."""


class GeometryError(NamsegError, ValueError):
    """Spatial sizes are invalid for the requested operation."""


class StateError(NamsegError, RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class ConfigError(NamsegError, ValueError):
    """Invalid configuration value."""


class DataError(NamsegError, ValueError):
    """Dataset contents violate a precondition."""


class FormatError(NamsegError, ValueError):
    """Malformed file contents."""


class DomainError(NamsegError, ValueError):
    """Argument outside the operation's domain (e.g. empty scope)."""


class DegenerateMapError(NamsegError, ValueError):
    """Activation map has no distinct maximum to anchor a scope."""


class SelectionError(NamsegError, ValueError):
    """Candidate selection invoked with nothing to select from."""


class NumericError(NamsegError, ArithmeticError):
    """Non-finite values where finite ones are required."""
