"""Exception types shared across the package."""


class ResNetLimitsError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(ResNetLimitsError, ValueError):
    pass


class InvalidInputError(ResNetLimitsError, ValueError):
    pass


class NumericalOverflowError(ResNetLimitsError, FloatingPointError):
    """Raised when a computation produces non-finite values.

    ``context`` carries whatever locates the failure (layer, step, s, norm).
    """

    def __init__(self, message, **context):
        self.context = context
        if context:
            details = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({details})"
        super().__init__(message)


class NonConvergenceError(ResNetLimitsError, RuntimeError):
    def __init__(self, message, residuals=()):
        self.residuals = list(residuals)
        super().__init__(message)


class IllConditionedCovarianceError(ResNetLimitsError, ValueError):
    pass


class ContractViolationError(ResNetLimitsError, ValueError):
    """Inputs violate a coupling or shape contract (e.g. uncoupled Δ^h)."""


class UnderdeterminedFitError(ResNetLimitsError, ValueError):
    pass
