"""Exception hierarchy shared across the toolkit."""


class GridwardError(Exception):
    """Base class for all toolkit errors."""


class CaseFormatError(GridwardError):
    """Malformed case or scenario document."""


class UnknownBusRef(CaseFormatError):
    """A branch, machine, load or bus-list entry references a missing bus."""


class DuplicateBusId(CaseFormatError):
    """Two bus records share the same id."""


class NoSlackBus(CaseFormatError):
    """The case declares no slack bus (or more than one)."""


class InvariantViolation(CaseFormatError):
    """A field value breaks a declared case invariant."""


class NonConvergence(GridwardError):
    """Iterative solve hit its iteration cap before meeting tolerance."""

    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


class SingularJacobian(GridwardError):
    """Newton Jacobian factorization failed."""


class SingularNetwork(GridwardError):
    """Network algebraic solve failed during a perturbed evaluation."""


class InfeasibleInit(GridwardError):
    """Dynamic initialization could not reach a consistent equilibrium."""


class StepDivergence(GridwardError):
    """The implicit integrator's inner Newton loop failed to converge."""


class NotHurwitz(GridwardError):
    """A matrix required to be stable has an eigenvalue with Re >= 0."""


class NotStabilizable(GridwardError):
    """Riccati solve failed: the pair is not stabilizable (or not detectable)."""


class NumericalFailure(GridwardError):
    """A dense linear-algebra routine returned an unusable result."""


class Unstable(GridwardError):
    """H-infinity norm requested for an unstable system."""


class Infeasible(GridwardError):
    """The synthesis LMI problem admits no solution at the requested pole bound."""


class SolverFailure(GridwardError):
    """The SDP backend failed; diagnostics attached."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class NoOscillatoryMode(GridwardError):
    """Mode targeting found no complex eigenvalue pair in the search band."""


class TargetModeUncontrollable(GridwardError):
    """The targeted mode cannot be moved from the attacker's channels."""


class IncompatibleBaseline(GridwardError):
    """Metrics comparison requested between trajectories on different grids."""


class StageFailure(GridwardError):
    """A pipeline stage failed; the message names the stage."""
