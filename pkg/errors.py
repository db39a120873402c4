"""
Exception types for the KMTL bandit library.

Each error also derives from the closest builtin so callers that only know
about ValueError / ArithmeticError keep working.
"""

from typing import Optional


class KMTLError(Exception):
    """Base class for library errors."""


class ConfigurationError(KMTLError, ValueError):
    """Invalid experiment, kernel or policy configuration."""


class DomainError(KMTLError, ValueError):
    """A parameter lies outside its mathematical domain."""


class NumericalError(KMTLError, ArithmeticError):
    """A linear-algebra step produced non-finite or inadmissible values."""

    def __init__(self, message: str, condition_number: Optional[float] = None):
        if condition_number is not None:
            message = f"{message} (condition number {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number


class DatasetParseError(KMTLError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DatasetValidationError(KMTLError, ValueError):
    """A parsed dataset disagrees with its manifest entry."""


class AggregationError(KMTLError, ValueError):
    """Regret traces cannot be aggregated together."""


class EnvironmentExhaustedError(KMTLError, RuntimeError):
    """The environment ran out of rounds before the horizon."""


class DiagnosticsFailure(KMTLError, AssertionError):
    """One or more theory diagnostics did not hold."""
