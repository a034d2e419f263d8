"""Exception hierarchy shared by every module of the package."""


class CtxNormError(Exception):
    """Base class for all package errors."""


class ShapeError(CtxNormError, ValueError):
    """Array rank or dimension does not match what an operation expects."""


class DomainError(CtxNormError, ValueError):
    """A value lies outside the domain an operation is defined on."""


class DegenerateComponentError(DomainError):
    """A mixture component carries zero responsibility mass in a group."""

    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class ConfigError(CtxNormError, ValueError):
    """Invalid experiment / preset configuration."""


class FormatError(CtxNormError, ValueError):
    """Malformed file content (IDX, JSON schemas)."""


class NumericalError(CtxNormError, ArithmeticError):
    """NaN or Inf detected during training or evaluation."""


class InternalError(CtxNormError, RuntimeError):
    """Broken internal contract, e.g. a backward pass fed a foreign cache."""
