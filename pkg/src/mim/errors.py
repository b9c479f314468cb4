"""Exception types shared across the package."""


class MIMError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MIMError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(MIMError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(MIMError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(MIMError, ValueError):
    """Input is well-typed but degenerate (e.g. a zero vector for cosine)."""


class ValidationError(MIMError, ValueError):
    """A configuration, corpus spec or data file failed validation."""


class NumericalError(MIMError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""
