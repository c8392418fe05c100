"""Exception hierarchy shared across the package."""


class OdenetError(Exception):
    """Base class for all package errors."""


class ConfigError(OdenetError):
    """Invalid configuration: bad widths, unknown tags, malformed config files."""


class NumericError(OdenetError):
    """Non-finite values, eigensolver failures, training divergence."""


class RolloutError(NumericError):
    """Non-finite state during an integrator rollout.

    Carries enough context (trajectory id, time, step index) to locate the
    failing step.
    """

    def __init__(self, message, trajectory=None, time=None, step=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.time = time
        self.step = step


class IntegrationError(NumericError):
    """Reference integrator failed (step-size underflow, solver abort)."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class PeriodDetectionError(NumericError):
    """Oscillation amplitude above threshold but no period could be found."""


class CorpusFormatError(OdenetError):
    """Malformed corpus file; names the offending line."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
