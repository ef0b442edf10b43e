"""Exception types shared across the package."""


class SwapnetError(Exception):
    """Base class for all package errors."""


# -- graph construction / routing --------------------------------------------

class DisconnectedGraph(SwapnetError):
    pass


class DuplicateEdge(SwapnetError):
    pass


class NegativeRate(SwapnetError):
    pass


class SwapRateBoundExceeded(SwapnetError):
    pass


class DegreeBoundExceeded(SwapnetError):
    pass


class SameNode(SwapnetError):
    pass


class DestinationTooClose(SwapnetError):
    pass


# -- queue operations ---------------------------------------------------------

class EmptyQueue(SwapnetError):
    pass


class NonZeroAge(SwapnetError):
    pass


class MissingEntry(SwapnetError):
    pass


# -- finite-network simulator -------------------------------------------------

class InvalidConfig(SwapnetError):
    pass


class InconsistentEvent(SwapnetError):
    pass


class EventBudgetExceeded(SwapnetError):
    pass


# -- deterministic solver -----------------------------------------------------

class TruncationTooLarge(SwapnetError):
    pass


class MassLeakExceeded(SwapnetError):
    pass


# -- fixed-point solver -------------------------------------------------------

class RateBoundExceeded(SwapnetError):
    pass


class EnsembleTooSmall(SwapnetError):
    pass


class NoContraction(SwapnetError):
    pass


class GridMismatch(SwapnetError):
    pass


# -- generators ---------------------------------------------------------------

class WeightMismatch(SwapnetError):
    pass


# -- harness ------------------------------------------------------------------

class ParseError(SwapnetError):
    pass


class ValidationError(SwapnetError):
    """Config violates a model bound; message names the bound."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SpaceMismatch(SwapnetError):
    pass
