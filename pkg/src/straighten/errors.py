"""Exception hierarchy.

Every failure the pipeline can report is a named subclass of
:class:`StraightenError` so callers (and the CLI exit-code mapping) can tell
preconditions apart from numerical or I/O trouble.
"""


class StraightenError(Exception):
    """Base class for all package errors."""


class PreconditionError(StraightenError):
    """Inputs violate a stated precondition (CLI exit code 3)."""


class DegenerateSample(PreconditionError):
    """Consecutive samples coincide, so no tangent can be estimated."""


class SelfIntersection(PreconditionError):
    """The discretized manifold is immersed, not embedded."""

    def __init__(self, message, distance=None, pair=None):
        super().__init__(message)
        self.distance = distance
        self.pair = pair


class PreconditionFailed(PreconditionError):
    """A theorem hypothesis (dimension, relative boundary, ...) fails."""

    def __init__(self, message, condition="codim"):
        super().__init__(message)
        self.condition = condition


class DependentField(PreconditionError):
    """A field vector lies in the tangent space within tolerance."""


class NotGrounded(PreconditionError):
    """The field points (nearly) vertically down somewhere."""


class AmbiguousFoot(StraightenError):
    """Two distant sheets are equidistant nearest feet of an ambient point."""


class InducedNeighbourhoodClash(AmbiguousFoot):
    """Locality-restricted foot resolution failed on an immersed object."""


class AntipodalCollar(StraightenError):
    """Great-circle localisation would pass through the downmost direction."""


class GeneralPositionFailed(StraightenError):
    """Random perturbation did not reach general position in time."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class NotConverged(StraightenError):
    """Flow reached ``t_max`` before the carried field became vertical.

    The partial trace is kept on ``self.trace`` for inspection.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class BudgetExceeded(StraightenError):
    """Local compression could not keep displacement under the budget."""

    def __init__(self, message, displacement=None, limiting=None):
        super().__init__(message)
        self.displacement = displacement
        self.limiting = limiting


class WrongMode(StraightenError):
    """A check was asked of a trace produced in an incompatible flow mode."""


class NonTransverse(StraightenError):
    """A double point meets at an angle below the transversality tolerance."""


class SchemaError(StraightenError):
    """Scene or trace file does not match the documented schema (exit 4)."""
