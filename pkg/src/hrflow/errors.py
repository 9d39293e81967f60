"""Exception types shared across the package."""


class HrfError(Exception):
    """Base class for all package errors."""


class ConfigError(HrfError, ValueError):
    """Invalid configuration or argument (CLI exit code 2)."""


class ShapeError(HrfError, ValueError):
    """Array shapes do not match the network or schedule."""


class UnsupportedDensityError(HrfError):
    """The distribution has no closed-form density."""


class UndefinedRegionError(HrfError, ValueError):
    """The marginal density vanishes, so the velocity distribution is undefined."""


class NumericalError(HrfError):
    """Numerical failure (CLI exit code 3)."""


class TrainingError(NumericalError):
    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)


class SolverError(NumericalError):
    def __init__(self, message: str, error_estimate: float | None = None):
        self.error_estimate = error_estimate
        if error_estimate is not None:
            message = f"{message} (last error estimate {error_estimate:.3g})"
        super().__init__(message)
