"""Exception types raised by the gamblets package."""


class GambletError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GambletError, ValueError):
    """Operand shapes are incompatible."""


class StructureError(GambletError, ValueError):
    """A hierarchy, tree or operator is malformed or inconsistent."""


class NotSPDError(GambletError, ValueError):
    """A factorization met a non-positive pivot."""

    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class RankError(GambletError, ValueError):
    """A matrix expected to have full rank is singular."""


class BreakdownError(GambletError, ArithmeticError):
    """An iterative method produced non-finite values."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite value encountered at iteration {iteration}")


class ConvergenceError(GambletError, RuntimeError):
    """An iterative solve did not reach its tolerance."""

    def __init__(self, message, level=None, residual=None, index=None):
        self.level = level
        self.residual = residual
        self.index = index
        super().__init__(message)


class CapacityError(GambletError, ValueError):
    """Problem size exceeds a configured cap."""


class MatrixMarketError(GambletError, ValueError):
    """Malformed Matrix Market input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(GambletError, ValueError):
    """Input data violates a documented precondition."""
