"""Exception types raised by the solvers.

Every failure mode that a caller may want to branch on has its own class.
All of them derive from ``SolverError`` so the CLI can map them to one exit code.
"""


class SolverError(RuntimeError):
    """Base class for numerical failures."""


class NonFinite(SolverError):
    """An iterate became NaN/Inf or exceeded the blow-up threshold."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class SymmetryLoss(SolverError):
    pass


class GridMismatch(SolverError):
    pass


class NonDeterministicDriver(SolverError):
    pass


class PreconditionViolated(SolverError):
    pass


class ShapeMismatch(SolverError):
    pass


class RegularizationDiverged(SolverError):
    pass


class M1NotPD(SolverError):
    pass


class SingularIminusQC(SolverError):
    pass


class P3Singular(SolverError):
    pass


class FixedPointDiverged(SolverError):
    pass


class IllConditioned(SolverError):
    """A matrix inverse was requested for a matrix above the condition cap."""


class SpecError(ValueError):
    """Malformed or invalid configuration."""


class SpecParseError(SpecError):
    pass


class SpecValidationError(SpecError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)
