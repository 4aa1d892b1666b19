"""Switching regions, boundary curves and executable strategies.

Every strategy speaks the same gap protocol: `gap(beliefs, times, a)` is positive while
policy a should be kept and drops to zero or below where a switch to `target(...)` is due.
Times are elapsed times since the start of control.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd

from .beliefgrid import interpolation_weights
from .bellman import LAYER_TOLERANCE, ValueSurface, intervene, intervention_table
from .errors import HorizonExceeded, InadmissibleStrategy
from .problem import Belief, as_belief, switch_cost_table

logger = logging.getLogger(__name__)

CONTINUE = -1

FloatArray = NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class StrategyTable:
    """Action per (layer, node, policy): CONTINUE or the index of the switch target."""

    surface: ValueSurface
    actions: NDArray[np.int64]
    gaps: NDArray[np.float64]
    eps_switch: float

    @property
    def policies(self) -> tuple[str, ...]:
        return self.surface.model.policies

    def action(self, n: int, node: int, a: int) -> int | None:
        target = int(self.actions[n, node, a])
        return None if target == CONTINUE else target

    def label(self, target: int) -> str:
        return "continue" if target == CONTINUE else f"switch-to-{self.policies[target]}"

    def region(self, n: int, a: int, b: int | None = None) -> NDArray[np.bool_]:
        """Node mask of Gamma(a) (any switch) or Gamma(a, b) on layer n."""
        labels = self.actions[n, :, a]
        return labels != CONTINUE if b is None else labels == b

    def to_frame(self) -> pd.DataFrame:
        lattice = self.surface.lattice
        n_nodes, n_policies = lattice.size, len(self.policies)
        labels = np.array(["continue", *(f"switch-to-{p}" for p in self.policies)])
        frames = []
        for n, tau in enumerate(self.surface.taus):
            frames.append(
                pd.DataFrame(
                    {
                        "tau": tau,
                        "node": np.tile(np.arange(n_nodes), n_policies),
                        **{
                            f"pi_{r + 1}": np.tile(lattice.points[:, r], n_policies)
                            for r in range(lattice.m)
                        },
                        "policy": np.repeat(self.policies, n_nodes),
                        "action": labels[self.actions[n].T.ravel() + 1],
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)

    def to_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def classify_regions(surface: ValueSurface, eps_switch: float) -> StrategyTable:
    """Label node (tau, pi, a) switch-to-b iff U - MU <= eps_switch, b the smallest maximizer."""
    costs = switch_cost_table(surface.model, surface.lattice.points)
    best, target = intervention_table(surface.values, costs[None, :, :, :])
    gaps = surface.values - best
    actions = np.where(gaps <= eps_switch, target, CONTINUE).astype(np.int64)
    actions.setflags(write=False)
    gaps.setflags(write=False)
    switching = int(np.count_nonzero(actions != CONTINUE))
    logger.info(
        "Classified %d of %d (layer, node, policy) entries as switching", switching, actions.size
    )
    return StrategyTable(surface=surface, actions=actions, gaps=gaps, eps_switch=eps_switch)


@dataclass(frozen=True)
class RegionBoundary:
    """Outline of Gamma_tau(a, b); for two states also its pi_1 extent."""

    tau: float
    nodes: tuple[int, ...]
    lower: float | None = None
    upper: float | None = None

    @property
    def empty(self) -> bool:
        return not self.nodes


def _edge_nodes(table: StrategyTable, mask: NDArray[np.bool_]) -> NDArray[np.int64]:
    # region nodes with a lattice neighbour k + e_r - e_s outside the region
    lattice = table.surface.lattice
    counts = lattice.counts
    on_edge = np.zeros(lattice.size, dtype=bool)
    for r in range(lattice.m):
        for s in range(lattice.m):
            if r == s:
                continue
            valid = counts[:, s] > 0
            shifted = counts[valid].copy()
            shifted[:, r] += 1
            shifted[:, s] -= 1
            neighbour = lattice.index_of(shifted)
            on_edge[np.flatnonzero(valid)[~mask[neighbour]]] = True
    return np.flatnonzero(mask & on_edge)


def boundary_curve(table: StrategyTable, a: int, b: int) -> list[RegionBoundary]:
    """Per layer, the boundary of the region where policy a switches to b.

    With two states the boundary is reported as the pi_1 extent [lower, upper] of the
    region; otherwise as the set of region nodes adjacent to a non-region node.
    """
    out = []
    points = table.surface.lattice.points
    for n, tau in enumerate(table.surface.taus):
        mask = table.region(n, a, b)
        if not mask.any():
            out.append(RegionBoundary(float(tau), ()))
        elif table.surface.model.m == 2:
            levels = points[mask, 0]
            out.append(
                RegionBoundary(
                    float(tau),
                    tuple(int(i) for i in np.flatnonzero(mask)),
                    float(levels.min()),
                    float(levels.max()),
                )
            )
        else:
            out.append(RegionBoundary(float(tau), tuple(int(i) for i in _edge_nodes(table, mask))))
    return out


def boundaries_frame(table: StrategyTable) -> pd.DataFrame:
    """Boundary table for two-state models: tau, from, to, lower, upper."""
    rows = []
    policies = table.policies
    for a in range(len(policies)):
        for b in range(len(policies)):
            if a == b:
                continue
            for edge in boundary_curve(table, a, b):
                rows.append(
                    {
                        "tau": edge.tau,
                        "from": policies[a],
                        "to": policies[b],
                        "lower": edge.lower,
                        "upper": edge.upper,
                    }
                )
    return pd.DataFrame(rows, columns=["tau", "from", "to", "lower", "upper"])


class Strategy(Protocol):
    """Anything the simulator can drive along a filtered path."""

    def reset(self, policy: int) -> None: ...

    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray: ...

    def target(self, pi: Belief, t: float, a: int) -> int: ...

    def arrival_target(self, pi: Belief, t: float, a: int) -> int | None: ...

    def notify_switch(self, t: float, source: int, target: int) -> None: ...


class GapStrategy:
    """Base for strategies whose arrival rule is the same gap test as between arrivals."""

    def reset(self, policy: int) -> None:
        pass

    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray:
        raise NotImplementedError

    def target(self, pi: Belief, t: float, a: int) -> int:
        raise NotImplementedError

    def arrival_target(self, pi: Belief, t: float, a: int) -> int | None:
        if self.gap(pi.pi[None, :], np.array([t]), a)[0] <= 0.0:
            return self.target(pi, t, a)
        return None

    def notify_switch(self, t: float, source: int, target: int) -> None:
        pass


@dataclass(eq=False)
class Controller(GapStrategy):
    """Optimal feedback strategy read off a solved surface.

    `horizon` is the remaining time at elapsed time 0; it defaults to the surface horizon
    and is ignored for stationary surfaces.
    """

    table: StrategyTable
    horizon: float | None = None
    policy: int = 0
    last_switch: float = field(default=-math.inf)

    def __post_init__(self) -> None:
        surface = self.table.surface
        if self.horizon is None:
            self.horizon = surface.horizon
        if surface.horizon is not None and self.horizon is not None:
            if self.horizon > surface.horizon + LAYER_TOLERANCE * max(1.0, surface.horizon):
                raise HorizonExceeded(f"Horizon {self.horizon} beyond the solved {surface.horizon}")

    @property
    def surface(self) -> ValueSurface:
        return self.table.surface

    def reset(self, policy: int) -> None:
        self.policy = policy
        self.last_switch = -math.inf

    def _layers(self, times: NDArray[np.float64]) -> NDArray[np.int64]:
        surface = self.surface
        if surface.horizon is None or self.horizon is None:
            return np.zeros(times.shape[0], dtype=np.int64)
        tau = self.horizon - times
        if np.any(tau < -LAYER_TOLERANCE) or np.any(tau > surface.horizon + LAYER_TOLERANCE):
            raise HorizonExceeded(f"Remaining horizon outside [0, {surface.horizon}]")
        layers = np.floor(np.maximum(tau, 0.0) / surface.dt + LAYER_TOLERANCE).astype(np.int64)
        return np.minimum(layers, surface.n_layers - 1)

    def raw_gap(self, beliefs: ArrayLike, times: ArrayLike, a: int) -> NDArray[np.float64]:
        """Interpolated U - MU for policy a at the nearest lower layer."""
        points = np.atleast_2d(np.asarray(beliefs, dtype=np.float64))
        layers = self._layers(np.atleast_1d(np.asarray(times, dtype=np.float64)))
        nodes, weights = interpolation_weights(self.surface.lattice, points)
        gaps = self.table.gaps[layers[:, None], nodes, a]
        return np.einsum("nk,nk->n", weights, gaps)

    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray:
        return self.raw_gap(beliefs, times, a) - self.table.eps_switch

    def target(self, pi: Belief, t: float, a: int) -> int:
        n = int(self._layers(np.array([t]))[0])
        return intervene(self.surface.layer(n), pi, a, self.surface.model)[1]

    def arrival_target(self, pi: Belief, t: float, a: int) -> int | None:
        if t <= self.last_switch:
            return None
        return super().arrival_target(pi, t, a)

    def notify_switch(self, t: float, source: int, target: int) -> None:
        self.policy = target
        self.last_switch = t

    def decide(
        self, pi: Belief | ArrayLike, tau: float | None = None, elapsed: float | None = None
    ) -> int | None:
        """Switch target for the current policy at remaining horizon tau, or None to continue.

        A stationary surface has no clock of its own: pass `elapsed` to have the
        one-switch-per-instant rule applied against the last notified switch.
        """
        belief = as_belief(pi)
        limit = self.surface.horizon
        now = elapsed
        if limit is None or tau is None:
            t = 0.0 if elapsed is None else elapsed
        else:
            if tau < 0.0 or tau > limit + LAYER_TOLERANCE:
                raise HorizonExceeded(f"Remaining horizon {tau} outside [0, {limit}]")
            t = (self.horizon or limit) - tau
            now = t if now is None else now
        if now is not None and now <= self.last_switch:
            return None
        if self.gap(belief.pi[None, :], np.array([t]), self.policy)[0] <= 0.0:
            return self.target(belief, t, self.policy)
        return None


def decide(
    controller: Controller,
    pi: Belief | ArrayLike,
    tau: float | None,
    elapsed: float | None = None,
) -> int | None:
    return controller.decide(pi, tau, elapsed)


class NeverSwitch(GapStrategy):
    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray:
        return np.full(np.atleast_2d(beliefs).shape[0], np.inf)

    def target(self, pi: Belief, t: float, a: int) -> int:
        return a


@dataclass(eq=False)
class ThresholdStrategy(GapStrategy):
    """Myopic rule: run `high` while pi[state] > theta and `low` while it is below."""

    theta: float = 0.5
    state: int = 0
    high: int = 0
    low: int = 1

    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray:
        level = np.atleast_2d(beliefs)[:, self.state]
        if a == self.high:
            return level - self.theta
        if a == self.low:
            return self.theta - level
        return np.full(level.shape[0], -1.0)

    def target(self, pi: Belief, t: float, a: int) -> int:
        if a == self.high:
            return self.low
        if a == self.low:
            return self.high
        return self.high if pi[self.state] >= self.theta else self.low


@dataclass(eq=False)
class SwitchAtArrivals(GapStrategy):
    """Moves to the next policy (cyclically) at every arrival, never in between."""

    n_policies: int = 2

    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray:
        return np.full(np.atleast_2d(beliefs).shape[0], np.inf)

    def target(self, pi: Belief, t: float, a: int) -> int:
        return (a + 1) % self.n_policies

    def arrival_target(self, pi: Belief, t: float, a: int) -> int | None:
        return self.target(pi, t, a)


@dataclass(eq=False)
class ScheduledStrategy(GapStrategy):
    """Open-loop schedule of (time, target) switches."""

    schedule: Sequence[tuple[float, int]] = ()
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        times = [t for t, _ in self.schedule]
        if any(t < 0.0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise InadmissibleStrategy(
                f"Schedule times must be nonnegative and strictly increasing: {times}"
            )

    def reset(self, policy: int) -> None:
        self._cursor = 0

    def gap(self, beliefs: FloatArray, times: FloatArray, a: int) -> FloatArray:
        times = np.atleast_1d(times)
        if self._cursor >= len(self.schedule):
            return np.full(times.shape[0], np.inf)
        return self.schedule[self._cursor][0] - times

    def target(self, pi: Belief, t: float, a: int) -> int:
        return self.schedule[self._cursor][1]

    def notify_switch(self, t: float, source: int, target: int) -> None:
        due = self.schedule[self._cursor][0] if self._cursor < len(self.schedule) else math.inf
        if t + LAYER_TOLERANCE < due:
            raise InadmissibleStrategy(f"Switch at {t} requested before its scheduled time {due}")
        self._cursor += 1


def heuristic(name: str, n_policies: int, theta: float = 0.5) -> GapStrategy:
    """Strategy by name: none, threshold or arrivals."""
    if name == "none":
        return NeverSwitch()
    if name == "threshold":
        return ThresholdStrategy(theta=theta)
    if name == "arrivals":
        return SwitchAtArrivals(n_policies=n_policies)
    raise KeyError(f"Unknown strategy: {name}")

