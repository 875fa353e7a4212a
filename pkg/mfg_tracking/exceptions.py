"""
Error hierarchy of the solver. Each error carries the process exit code the
command line maps it to.
"""


class MfgError(Exception):
    exit_code: int = 1


class DomainError(MfgError, ValueError):
    """An argument is outside the domain of an operation."""


class ParameterError(DomainError):
    """Invalid or incomplete run configuration."""


class GridMismatchError(DomainError):
    """Curves and kernel tables live on different time grids."""


class ConvergenceError(MfgError):
    exit_code = 2

    def __init__(self, message: str, residual: float | None = None) -> None:
        super().__init__(message)
        self.residual = residual

    def __str__(self) -> str:
        msg = super().__str__()
        if self.residual is not None:
            return f"{msg} (residual: {self.residual:.3e})"
        return msg


class BracketError(ConvergenceError):
    """The dual level search could not bracket the target state."""


class QuadratureError(ConvergenceError):
    """Adaptive quadrature did not reach the requested accuracy."""


class VerificationError(MfgError):
    exit_code = 3

    def __init__(self, message: str, residual: float | None = None) -> None:
        super().__init__(message)
        self.residual = residual
