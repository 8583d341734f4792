"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid model, sampler or basis configuration."""


class DataError(ValueError):
    """Input data that cannot be used to fit the model."""


class DomainError(ValueError):
    """Evaluation requested outside the supported time domain."""


class NumericalError(ArithmeticError):
    """A linear-algebra step failed (rank deficiency, non-finite values)."""
