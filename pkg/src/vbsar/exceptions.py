"""Exception hierarchy shared by the estimator, the harness and the CLI."""


class VBSARError(Exception):
    """Base class for all package errors."""


class DomainError(VBSARError, ValueError):
    """An argument lies outside the domain of a special function."""


class ConfigError(VBSARError, ValueError):
    """Invalid configuration value or model setup."""


class InputError(VBSARError, ValueError):
    """Malformed or non-finite input data."""


class NumericalError(VBSARError, ArithmeticError):
    """A linear solve failed or an iterate became non-finite."""


class DegenerateSignalError(NumericalError):
    """Every entry of a shrinkage signal vector is zero."""


class HarnessError(VBSARError):
    """Every Monte Carlo replication failed."""
