"""Exception hierarchy shared across the package.

Every failure mode that callers are expected to handle gets its own class;
generic ValueError/TypeError are reserved for programming errors.
"""


class SsdiffError(Exception):
    """Base class for all package-specific errors."""


class DomainError(SsdiffError):
    """A point violates the family's domain (off the manifold)."""


class DomainBoundaryError(DomainError):
    """A point sits on a boundary where the sufficient statistic diverges."""


class SamplerFailure(SsdiffError):
    """A rejection sampler exceeded its iteration cap."""

    def __init__(self, message, kappa=None):
        super().__init__(message)
        self.kappa = kappa


class NumericalOverflowError(SsdiffError):
    """A log-density or derived quantity became non-finite."""


class KlFormulaError(SsdiffError):
    """A closed-form KL came out negative beyond tolerance; fail loudly."""


class ScheduleError(SsdiffError):
    """Invalid noise schedule (monotonicity, positivity, shape, dof)."""


class EstimatorError(SsdiffError):
    """A mutual-information estimator failed (bound inversion, coverage)."""


class TailShapeError(SsdiffError):
    """Tail sample length inconsistent with the schedule."""


class TailStepError(SsdiffError):
    """Tail update attempted below t=1."""


class GraphError(SsdiffError):
    """Reverse-mode graph integrity violation."""


class SamplingPlanError(SsdiffError):
    """Reduced-step evaluation plan is invalid (must include T and 1)."""


class CheckpointMismatchError(SsdiffError):
    """Checkpoint refers to a different schedule or normalizer."""


class ConfigError(SsdiffError):
    """Configuration failed validation."""
