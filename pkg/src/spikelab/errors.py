"""Exception hierarchy.

Input problems subclass ``ValueError`` so callers that only care about bad
arguments can catch the builtin; numerical failures do not.
"""


class SpikelabError(Exception):
    pass


class InputError(SpikelabError, ValueError):
    pass


class EmptyInputError(InputError):
    pass


class NonPositiveEigenvalueError(InputError):
    pass


class DimensionMismatchError(InputError):
    pass


class GroupTooSmallError(InputError):
    pass


class SingleGroupError(InputError):
    pass


class WrongClusterCountError(InputError):
    pass


class EmptyClusterError(InputError):
    pass


class ParseError(InputError):
    pass


class SchemaError(InputError):
    pass


class NumericalError(SpikelabError):
    pass


class PoleViolationError(NumericalError):
    pass


class NoRootFoundError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    pass


class BranchAmbiguityError(NumericalError):
    pass


class SingularQError(NumericalError):
    pass


class ClusterMismatchError(NumericalError):
    pass


class DegenerateDenominatorError(NumericalError):
    pass


class EstimationError(SpikelabError):
    pass


class NonPositiveBhatError(EstimationError):
    """The trace estimate of ``b_p`` came out non-positive."""


class BelowEdgeError(EstimationError):
    """A spike inversion was requested at or below the bulk edge."""


class MissingOracleError(EstimationError):
    pass


class StudyAbortedError(SpikelabError):
    """Too many replicates failed for the aggregate to be meaningful."""
