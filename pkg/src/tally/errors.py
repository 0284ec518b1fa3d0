"""Exception hierarchy shared by every module."""

from __future__ import annotations


class TallyError(Exception):
    """Base class for all errors raised by this package."""


class InconsistentMarginsError(TallyError, ValueError):
    """Row and column sums disagree, or a margin entry is not a positive integer."""


class BudgetExceededError(TallyError):
    """A state-space or enumeration budget would be exceeded.

    ``budget`` names the limit that tripped so callers (the CLI in particular)
    can report it.
    """

    def __init__(self, message: str, budget: str = "dp_state_budget", limit: float | None = None):
        super().__init__(message)
        self.budget = budget
        self.limit = limit


class ConvergenceError(TallyError):
    """An iterative solver hit its iteration cap before reaching tolerance."""
