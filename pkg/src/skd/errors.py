"""Exception hierarchy shared by all skd modules."""


class SkdError(Exception):
    """Base class for all library errors."""


class ShapeError(SkdError):
    """Input has the wrong rank or incompatible extents."""


class NumericError(SkdError):
    """A numerical routine failed (non-convergence, NaN, divergence)."""


class ConfigError(SkdError):
    """Invalid configuration value or schema violation."""


class StateError(SkdError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class PreconditionError(SkdError):
    """Caller violated a documented precondition."""


class IntegrityError(SkdError):
    """Internal consistency check failed (e.g. conjugate symmetry broken)."""


class ParseError(SkdError):
    """A container or config file could not be parsed."""
