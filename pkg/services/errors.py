"""Exception hierarchy shared by every service module."""


class ReliabilityError(Exception):
    """Base class for all errors raised by the services package."""


class ChannelValidationError(ReliabilityError, ValueError):
    """A channel description violates one of the Dmc invariants."""


class RowSumViolation(ChannelValidationError):
    pass


class NegativeEntry(ChannelValidationError):
    pass


class NoZeroCostLetter(ChannelValidationError):
    pass


class UnreachableOutput(ChannelValidationError):
    pass


class DegenerateDimensions(ChannelValidationError):
    pass


class ChannelLoadError(ReliabilityError):
    """Channel file could not be parsed or a built-in name is unknown."""


class ConfigError(ReliabilityError, ValueError):
    """Command-line parameters outside their documented ranges."""


class SolverNotConverged(ReliabilityError):
    """Blahut-Arimoto iteration hit its cap with the bound gap still open."""

    def __init__(self, message: str, best=None, gap: float = float("nan")):
        super().__init__(message)
        self.best = best
        self.gap = gap


class RateOutOfRange(ReliabilityError, ValueError):
    """A rate, capacity level or cost lies outside the domain of an operation."""

    def __init__(self, message: str, limit: float = float("nan")):
        super().__init__(message)
        self.limit = limit


class InfeasibleSplit(ReliabilityError, ValueError):
    """The phase split eta lies outside the feasible interval I_{R,P}."""


class ZeroErrorRegime(ReliabilityError):
    """Some D_k is infinite, so the channel belongs on the zero-error path."""


class NotZeroErrorCapable(ReliabilityError):
    pass


class ZeroErrorViolation(ReliabilityError):
    pass


class CodebookTooLarge(ReliabilityError):
    pass


class TranscriptMismatch(ReliabilityError):
    pass


class PathwiseViolation(ReliabilityError):
    """A pathwise converse inequality failed on a simulated trace."""

    def __init__(self, message: str, trace_index: int = -1, step: int = -1):
        super().__init__(message)
        self.trace_index = trace_index
        self.step = step


class SimulationStalled(ReliabilityError):
    """Some trials were still retransmitting when the round cap was reached."""
