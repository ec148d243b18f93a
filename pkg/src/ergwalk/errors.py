"""Exception hierarchy shared across the engines."""


class ErgwalkError(Exception):
    """Base class for all package errors."""


class ConfigError(ErgwalkError):
    """Invalid environment or experiment configuration."""


class DegenerateSiteError(ErgwalkError):
    """A site has zero total rate (or an equally unusable parameter)."""


class WindowExhaustionError(ErgwalkError):
    """A process left the materializable site window."""


class ExplosionGuardError(ErgwalkError):
    """The event count passed the explosion guard before the horizon."""


class TruncationError(ErgwalkError):
    """A truncated fixed point or series did not converge at the depth cap.

    Carries a ``diagnostics`` dict describing the last truncation level.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SeriesDivergenceError(TruncationError):
    """Series terms stopped decaying: the regime assumption is violated."""


class InfeasibleCoefficientError(ErgwalkError):
    """A branching coefficient denominator is nonpositive."""
