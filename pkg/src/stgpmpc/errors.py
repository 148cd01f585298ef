"""Exception types shared across the package, mapped to CLI exit codes."""

EXIT_OK = 0
EXIT_VALIDATION_FAILURE = 1
EXIT_CONFIGURATION_ERROR = 2
EXIT_NUMERICAL_ERROR = 3


class ConfigurationError(Exception):
    """Invalid configuration: bad parameter values, missing files, schema mismatch."""


class NumericalError(Exception):
    """Numerical failure: factorization breakdown, non-finite values, singular systems."""
