class TrackSwitchError(Exception):
    """Base class for every error raised by trackswitch."""


class ModelError(TrackSwitchError, ValueError):
    """A model instance violates one of its invariants."""


class BadShape(ModelError):
    pass


class NonGenerator(ModelError):
    pass


class BadStochasticRow(ModelError):
    pass


class NonPositiveIntensity(ModelError):
    pass


class NonPositiveSwitchCost(ModelError):
    pass


class TriangleViolation(ModelError):
    def __init__(self, state: int, a: int, b: int, c: int, gap: float) -> None:
        self.triple = (state, a, b, c)
        self.gap = gap
        super().__init__(
            f"Triangle inequality violated in state {state}: "
            f"K[{a}][{b}] + K[{b}][{c}] < K[{a}][{c}] by {gap:.3g}"
        )


class ModelValidationError(ModelError):
    """Collects every violated invariant of a model."""

    def __init__(self, violations: list[ModelError]) -> None:
        self.violations = violations
        lines = [f"- {type(v).__name__}: {v}" for v in violations]
        super().__init__("Model validation failed:\n" + "\n".join(lines))

    @property
    def first(self) -> ModelError:
        return self.violations[0]


class FilterError(TrackSwitchError, ValueError):
    pass


class InvalidBelief(FilterError):
    pass


class NegativeTime(FilterError):
    pass


class DegenerateMass(FilterError):
    pass


class ImpossibleMark(FilterError):
    pass


class UnsortedArrivals(FilterError):
    pass


class GridError(TrackSwitchError, ValueError):
    pass


class ResolutionTooLarge(GridError):
    pass


class SolverError(TrackSwitchError, RuntimeError):
    pass


class MissingLayer(SolverError):
    pass


class NoDiscount(SolverError):
    pass


class MaxIterations(SolverError):
    pass


class StrategyError(TrackSwitchError, RuntimeError):
    pass


class HorizonExceeded(StrategyError):
    pass


class InadmissibleStrategy(StrategyError):
    pass


class ArtifactError(TrackSwitchError, RuntimeError):
    """Solve artifacts are missing or do not match the requested model."""
