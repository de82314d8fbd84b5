"""Exception types shared across the package.

The CLI maps these onto exit codes: config/validation problems exit 2,
numerical/metric failures exit 3, IO failures exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration (bad dims, non-divisor token length, ...)."""


class DataError(ValueError):
    """Malformed dataset input (manifest parse errors, invariant violations)."""


class ShapeError(ValueError):
    """Incompatible matrix shapes in a numeric operation."""


class NumericsError(ArithmeticError):
    """Non-finite values or a degenerate numerical situation at runtime."""


class MetricError(NumericsError):
    """A metric is undefined for the given inputs (no comparable pairs, zero variance)."""
