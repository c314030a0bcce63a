from typing import Optional


class RisFlowError(Exception):
    """Base class for every error raised by the ris_flow package."""


class InvalidModelError(RisFlowError, ValueError):
    """A correlation or policy model with out-of-range parameters."""


class InvalidDimensionError(RisFlowError, ValueError):
    """Array sizes that are zero or do not agree with each other."""


class DomainError(RisFlowError, ValueError):
    """An argument outside the domain of the operation."""


class DegenerateGeometryError(RisFlowError, ValueError):
    """A location or access point placed on top of the RIS."""


class BudgetExceededError(RisFlowError, ValueError):
    """An enumeration larger than the allowed budget."""


class ConfigError(RisFlowError, ValueError):
    """Unreadable or inconsistent configuration."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class NumericError(RisFlowError, ArithmeticError):
    """A numerical procedure produced an unusable result."""


class OracleFailure(RisFlowError, ArithmeticError):
    """One or more validation oracles measured outside tolerance."""
