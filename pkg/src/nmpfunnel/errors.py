"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems,
violated structural assumptions on the plant, and numerical failures.
"""

__all__ = [
    "NmpFunnelError",
    "ConfigError",
    "AssumptionError",
    "NoStrictRelativeDegree",
    "NearSingularMarkovParameter",
    "DisturbanceMatchingError",
    "CompletionFailure",
    "NoDecomposition",
    "DisturbanceImageViolation",
    "A2Violation",
    "A3Violation",
    "NumericalFailure",
    "ReorderingError",
    "SpectraNotSeparated",
    "ClusterSeparationFailure",
    "SlowDecay",
    "StepRejected",
    "FunnelBoundaryReached",
    "StepSizeUnderflow",
    "InadmissibleInitialCondition",
    "RestartInadmissible",
    "EnvelopeViolation",
]


class NmpFunnelError(Exception):
    """Base class for all package errors."""


class ConfigError(NmpFunnelError):
    """Malformed or inconsistent run configuration."""

    def __init__(self, message, line=None):
        self.line = line
        self.message = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AssumptionError(NmpFunnelError):
    """A structural assumption of the synthesis does not hold.

    ``assumption`` names the violated condition, e.g. ``"A1"`` or
    ``"relative_degree"``.
    """

    assumption = "unknown"

    def __init__(self, message, assumption=None, diagnostics=None):
        super().__init__(message)
        if assumption is not None:
            self.assumption = assumption
        self.diagnostics = diagnostics or []


class NoStrictRelativeDegree(AssumptionError):
    assumption = "relative_degree"


class NearSingularMarkovParameter(AssumptionError):
    assumption = "relative_degree"


class DisturbanceMatchingError(AssumptionError):
    assumption = "disturbance_matching"


class CompletionFailure(AssumptionError):
    assumption = "normal_form"


class NoDecomposition(AssumptionError):
    assumption = "A1"


class DisturbanceImageViolation(AssumptionError):
    assumption = "A1"


class A2Violation(AssumptionError):
    assumption = "A2"


class A3Violation(AssumptionError):
    assumption = "A3"


class NumericalFailure(NmpFunnelError):
    """A numerical procedure failed or lost its accuracy guarantee."""


class ReorderingError(NumericalFailure):
    def __init__(self, message, block_pair=None):
        super().__init__(message)
        self.block_pair = block_pair


class SpectraNotSeparated(NumericalFailure):
    pass


class ClusterSeparationFailure(NumericalFailure):
    pass


class SlowDecay(NumericalFailure):
    pass


class StepRejected(NumericalFailure):
    """Raised from a right-hand side to make the integrator shrink the step."""


class FunnelBoundaryReached(StepRejected):
    def __init__(self, message, level=None, ratio=None):
        super().__init__(message)
        self.level = level
        self.ratio = ratio


class StepSizeUnderflow(NumericalFailure):
    def __init__(self, message, t=None, cause=None):
        super().__init__(message)
        self.t = t
        self.cause = cause


class InadmissibleInitialCondition(NumericalFailure):
    def __init__(self, message, ratios=None):
        super().__init__(message)
        self.ratios = ratios


class RestartInadmissible(InadmissibleInitialCondition):
    pass


class EnvelopeViolation(NumericalFailure):
    pass
