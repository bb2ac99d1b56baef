class ValidationError(ValueError):
    """Invalid input or configuration."""


class NumericalError(RuntimeError):
    """Scheme instability, bound violation or other numerical failure."""
