"""Exception types shared across the package."""


class DercoordError(Exception):
    """Base class for package errors."""


class FeederFormatError(DercoordError):
    """Input document cannot be parsed or violates the file schema."""


class ModelInvariantError(DercoordError):
    """A structural invariant of the network model is violated."""


class SolverError(DercoordError):
    """Conic solve did not reach an acceptable status."""

    def __init__(self, status: str, detail: str = ""):
        self.status = status
        super().__init__(f"solver status {status}" + (f": {detail}" if detail else ""))


class InfeasibleScheduleError(DercoordError):
    """A DER subproblem has an empty feasible set."""


class BisectionError(DercoordError):
    """Dual bisection could not bracket the target."""


class DriftError(DercoordError):
    """Linearized re-solve moved too far from the physical operating point."""


class DivergenceError(DercoordError):
    """An iterative method's error measure kept growing."""
