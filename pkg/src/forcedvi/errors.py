"""Exception types raised across the package."""


class ForcedVIError(Exception):
    """Base class for all package errors."""


class ViolationFound(ForcedVIError):
    """A retraction failed one of its axioms."""

    def __init__(self, symbol: str, magnitude: float):
        self.symbol = symbol
        self.magnitude = float(magnitude)
        super().__init__(f"{symbol} violated by {self.magnitude:.3e}")


class NonFinite(ForcedVIError, ArithmeticError):
    """A value or derivative came out as inf/nan."""


class SingularMass(ForcedVIError, ArithmeticError):
    """The velocity Hessian of a Lagrangian is (numerically) singular."""

    def __init__(self, condition: float):
        self.condition = float(condition)
        super().__init__(f"mass matrix condition number {self.condition:.3e} above threshold")


class LegendreInversionFailed(ForcedVIError, ArithmeticError):
    """Newton inversion of the fibre derivative did not converge."""


class InnerSolveFailed(ForcedVIError, ArithmeticError):
    """Interior Galerkin stages could not be eliminated."""

    def __init__(self, residual: float):
        self.residual = float(residual)
        super().__init__(f"interior stage solve failed, residual {self.residual:.3e}")


class NewtonDiverged(ForcedVIError, ArithmeticError):
    """A discrete Euler-Lagrange solve did not reach tolerance."""

    def __init__(self, iters: int, residual: float, step: int | None = None):
        self.iters = int(iters)
        self.residual = float(residual)
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"Newton failed{where} after {self.iters} iterations, residual {self.residual:.3e}")


class SingularD12(ForcedVIError, ArithmeticError):
    """The Newton matrix of a discrete step is singular."""


class StepTooSmall(ForcedVIError, ValueError):
    """Time step below the conditioning floor of the discrete solvers."""


class GridMismatch(ForcedVIError, ValueError):
    """Two trajectories are sampled on different time grids."""


class BadMass(ForcedVIError, ValueError):
    """A mass matrix is not symmetric positive definite."""


class ConfigError(ForcedVIError, ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ReferenceMismatch(ForcedVIError, ArithmeticError):
    """Two independent reference solutions disagree beyond tolerance."""

    def __init__(self, gap: float, tol: float):
        self.gap = float(gap)
        super().__init__(f"reference solutions differ by {self.gap:.3e} (limit {tol:.0e})")
