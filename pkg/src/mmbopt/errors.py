"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid dimensions, hyper-parameters or config file contents."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (unknown oracle kind, bad block id)."""


class NumericalError(ArithmeticError):
    """Factorization failure or non-finite iterate."""


class UndefinedMetricError(ValueError):
    """AUC-type metric requested on single-class input."""


class SingleClassBatch(ValueError):
    """Minibatch lacks a positive or a negative sample; the caller should resample."""
