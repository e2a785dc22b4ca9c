"""Exception types shared across the package."""


class MetalError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(MetalError, ValueError):
    """Shapes do not fit the operation."""


class DomainError(MetalError, ValueError):
    """An input lies outside the mathematical domain of the operation."""


class ContractError(MetalError, ValueError):
    """A precondition of the call was violated."""


class NumericError(MetalError, ArithmeticError):
    """A computation produced a non-finite value."""


class SpecError(MetalError, ValueError):
    """A model or run configuration is invalid."""


class FormatError(MetalError, ValueError):
    """A checkpoint or episode file is malformed."""
