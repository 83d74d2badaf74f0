"""Exception types raised across the package.

Everything derives from :class:`SpanelError` so callers can catch the
package's failures with a single except clause while letting genuine
programming errors (TypeError and friends) propagate.
"""


class SpanelError(Exception):
    """Base class for all package-specific errors."""


class IsolatedUnit(SpanelError):
    """A unit has no neighbors and the policy forbids zero rows."""


class NonBinaryAdjacency(SpanelError):
    """Adjacency input contains entries other than 0 and 1."""


class BadLagSpec(SpanelError):
    """A lag specification references unknown sources, columns or orders."""


class DegenerateFactor(SpanelError):
    """Factor loadings make a forward-orthogonalization weight undefined."""


class TooManyFactors(SpanelError):
    """More factors than can be removed from T periods."""


class RankDeficientInstruments(SpanelError):
    """Instrument block has lower rank than the caller required."""


class SingularWeightMatrix(SpanelError):
    """Moment weight matrix is numerically singular and fallback is off."""


class SingularProjection(SpanelError):
    """Projection needed to concentrate out slope coefficients is singular."""


class NoStartingValue(SpanelError):
    """Starting-value search produced no usable candidate."""


class DidNotConverge(SpanelError):
    """Optimizer finished without meeting the convergence criterion."""


class RankDeficientJacobian(SpanelError):
    """Moment Jacobian lacks full column rank; sandwich undefined."""


class RankDeficientRestriction(SpanelError):
    """Restriction matrix in a Wald test does not have full row rank."""


class SingularSystem(SpanelError):
    """Simultaneous system (I - lambda M) could not be solved accurately."""


class OutsideSufficientConditions(SpanelError):
    """Closed-form covariance requested where its remainder terms are unknown."""


class ConfigError(SpanelError):
    """Command-line configuration file is missing keys or malformed."""
