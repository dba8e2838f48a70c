"""Exception types shared across the package.

Grouping them here keeps error handling uniform: configuration and shape
problems are ValueErrors (the CLI maps them to exit code 2), numerical
blow-ups and divergence are runtime conditions (exit code 3).
"""


class ShapeError(ValueError):
    """Operands or configuration imply impossible tensor shapes."""


class ConfigError(ValueError):
    """A config value is outside its allowed domain."""


class FormatError(ValueError):
    """A file on disk does not match the documented container layout."""


class GraphError(RuntimeError):
    """Autodiff graph misuse: non-scalar loss root or a cycle."""


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf; raised at the offending op."""


class DivergenceError(RuntimeError):
    """Training left the finite/stable regime; carries the failing step."""

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
