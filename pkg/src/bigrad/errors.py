"""Exception hierarchy shared across the package."""


class BigradError(Exception):
    """Base class for all package-specific failures."""


class DimensionMismatch(BigradError):
    """Operands have incompatible shapes."""


class NonConvergence(BigradError):
    """An iterative method hit its cap or stagnated before reaching tolerance."""


class Singular(BigradError):
    """A linear system has no reliable solution (pivot below threshold)."""


class SingularInnerHessian(Singular):
    """The inner-problem Hessian solve failed near the current iterate."""


class SingularSystem(Singular):
    """The stacked adjoint system is not invertible at the solution."""


class Infeasible(BigradError):
    """A linear equality system is inconsistent."""


class InfeasiblePoint(BigradError):
    """A barrier evaluation point violates a strict inequality constraint."""


class SolverFailure(BigradError):
    """A combinatorial solver or minimization oracle failed."""


class NonBinaryInput(BigradError):
    """A vector expected to be 0/1-valued is not."""


class TooManyCities(BigradError):
    """Tour instance exceeds the bitmask dynamic-programming bound."""


class TooLarge(BigradError):
    """Enumeration would exceed the configured size cap."""


class LabelExplosion(BigradError):
    """Label-correcting search exceeded its label cap."""


class BudgetExceedsDim(BigradError):
    """Selection budget is inconsistent with the ground-set size."""


class DivergedTraining(BigradError):
    """Training loss or cost blew up beyond the divergence guard."""


class NoSamples(BigradError):
    """An evaluation split contains no samples."""
