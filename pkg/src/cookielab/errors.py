"""Shared exception types."""


class CookielabError(Exception):
    """Base class for all package-specific failures."""


class ScaleTooSmallError(CookielabError, ValueError):
    """The requested lattice scale cannot accommodate the drift bound."""

    def __init__(self, bound: float, n: int, minimal_n: int):
        self.bound = bound
        self.n = n
        self.minimal_n = minimal_n
        super().__init__(
            f"drift bound {bound} requires scale n > {bound / 2:g}; "
            f"got n={n}, smallest admissible n is {minimal_n}"
        )


class CensoredRunError(CookielabError, RuntimeError):
    """A stopped-walk quantity was requested from a run that hit its step cap."""


class RunawayChainError(CookielabError, RuntimeError):
    """A chain sampler exceeded its trial guard (likely non-recurrent regime)."""


class TruncationError(CookielabError, RuntimeError):
    """The kernel series cannot meet the requested tolerance within L_max lags."""


class UnsupportedCriterionError(CookielabError, ValueError):
    """The recurrence criterion does not cover the supplied drift field."""


class NumericalBlowupError(CookielabError, RuntimeError):
    """An SDE path produced a non-finite state."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite state at step {step}{': ' + detail if detail else ''}")


class ExperimentInvalidError(CookielabError, RuntimeError):
    """An experiment violated a validity gate (e.g. too much censoring)."""
