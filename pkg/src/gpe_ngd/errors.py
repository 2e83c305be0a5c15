"""Exception types shared across the package."""


class GpeError(Exception):
    """Base class for all package-specific errors."""


class NodeCrossing(GpeError):
    """A wavefunction value fell below the node threshold at a sample point.

    The ground state is strictly positive, so a persistent node usually
    signals a bad initialization; callers should resample or re-init.
    """

    def __init__(self, indices, threshold):
        self.indices = indices
        self.threshold = threshold
        super().__init__(
            f"|psi| < {threshold:g} at {len(indices)} sample(s); first index {indices[0]}"
        )


class DegenerateCovariance(GpeError):
    """Walker ensemble covariance is numerically singular."""


class InsufficientCoverage(GpeError):
    """Importance-sampling proposal badly mismatched with the integrand."""

    def __init__(self, ess, n):
        self.ess = ess
        self.n = n
        super().__init__(f"effective sample size {ess:.1f} below 1% of n={n}")


class DimensionMismatch(GpeError):
    """Spatial dimension of an input disagrees with the potential/grid."""


class SizeGuard(GpeError):
    """Refusing to materialize an array above the configured size guard."""


class RankDeficient(GpeError):
    """Sketched operator is numerically zero; no usable Nystrom basis."""


class Breakdown(GpeError):
    """Conjugate gradient encountered a non-positive curvature direction."""


class NoConvergence(GpeError):
    """Iterative solver exhausted its iteration budget.

    Carries the best iterate so callers can decide whether to proceed.
    """

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)


class ConfigError(GpeError):
    """Experiment configuration failed schema validation."""
