"""Exception types shared across the package."""


class LabelNoiseError(Exception):
    """Base class for package errors."""


class ShapeMismatch(LabelNoiseError):
    """Operands do not conform to an operation's shape rule."""


class DomainError(LabelNoiseError):
    """A numeric-domain precondition was violated (log of <= 0, division by 0)."""


class UsageError(LabelNoiseError):
    """An API was called out of protocol (e.g. backward on a consumed tape)."""


class ParseError(LabelNoiseError):
    """A file could not be parsed; message carries the offending line."""
