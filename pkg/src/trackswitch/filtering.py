"""Explicit filter of the hidden chain.

The belief follows a deterministic flow between arrivals and a Bayes jump at each arrival.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import expm, null_space

from .errors import DegenerateMass, ImpossibleMark, NegativeTime, UnsortedArrivals
from .problem import Belief, SwitchingModel, as_belief

CHAIN_HORIZON = 5.0
MIN_SURVIVAL = 1e-290


@dataclass(frozen=True)
class UnnormalizedBelief:
    """m(t, pi) = pi exp(t(Q - Lambda)); its total mass is P{no arrival in [0, t]}."""

    m: NDArray[np.float64]

    @property
    def survival(self) -> float:
        return float(self.m.sum())

    def normalized(self) -> Belief:
        s = self.survival
        if s < MIN_SURVIVAL:
            raise DegenerateMass(f"Survival mass {s!r} underflowed; propagate in shorter steps")
        # exp(t(Q - Lambda)) is entrywise nonnegative; negative entries are roundoff
        return Belief(np.clip(self.m, 0.0, None) / s)


@dataclass(frozen=True, eq=False)
class FlowCache:
    """One-step propagator P_dt = exp(dt (Q - Lambda)) shared by lattice sweeps."""

    model: SwitchingModel
    dt: float
    _powers: dict[int, NDArray[np.float64]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise NegativeTime(f"Flow step must be positive, got {self.dt}")

    @cached_property
    def step(self) -> NDArray[np.float64]:
        P = expm(self.dt * self.model.sub_generator)
        P.setflags(write=False)
        return P

    def power(self, k: int) -> NDArray[np.float64]:
        if k not in self._powers:
            self._powers[k] = np.linalg.matrix_power(self.step, k)
        return self._powers[k]

    def trajectory(
        self, points: NDArray[np.float64], steps: int
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Flow a batch of beliefs over `steps` mesh steps.

        Returns (x, s) with x of shape (steps + 1, n, m) holding x(k dt, pi) and s of
        shape (steps + 1, n) holding the survival mass s(k dt, pi). The unnormalized
        vector is m(k dt, pi) = s * x.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n, m = points.shape
        x = np.empty((steps + 1, n, m))
        s = np.empty((steps + 1, n))
        x[0], s[0] = points, 1.0
        for k in range(1, steps + 1):
            nxt = x[k - 1] @ self.step
            mass = nxt.sum(axis=1)
            x[k] = nxt / mass[:, None]
            s[k] = s[k - 1] * mass
        return x, s


def _check_time(t: float) -> None:
    if t < 0.0:
        raise NegativeTime(f"Time must be nonnegative, got {t}")


def propagate_m(t: float, pi: Belief | ArrayLike, model: SwitchingModel) -> UnnormalizedBelief:
    """Unnormalized belief after t time units without an arrival."""
    _check_time(t)
    prior = as_belief(pi).pi
    if t == 0.0:
        return UnnormalizedBelief(prior.copy())
    return UnnormalizedBelief(prior @ expm(t * model.sub_generator))


def flow_x(t: float, pi: Belief | ArrayLike, model: SwitchingModel) -> Belief:
    """Deterministic belief flow x(t, pi), chained in steps of at most 5/lambda_max."""
    _check_time(t)
    belief = as_belief(pi)
    if t == 0.0 or model.m == 1:
        return belief
    chunk = CHAIN_HORIZON / model.lam_max
    remaining = t
    while remaining > 0.0:
        step = min(chunk, remaining)
        belief = propagate_m(step, belief, model).normalized()
        remaining -= step
    return belief


def flow_drift(pi: Belief | ArrayLike, model: SwitchingModel) -> NDArray[np.float64]:
    """Right side of the belief ODE.

    mu_i(pi) = sum_j q_ji pi_j - lambda_i pi_i + pi_i sum_j lambda_j pi_j
    """
    p = as_belief(pi).pi
    return p @ model.Q - model.lam * p + p * float(model.lam @ p)


def mark_likelihood(pi: NDArray[np.float64], j: int, model: SwitchingModel) -> NDArray[np.float64]:
    """Unnormalized posterior lambda_i nu[i][j] pi_i; works on a batch of beliefs."""
    return pi * (model.lam * model.nu[:, j])


def jump_update(pi: Belief | ArrayLike, j: int, model: SwitchingModel) -> Belief:
    """Bayes update of the belief at an arrival carrying mark index j."""
    if not 0 <= j < model.d:
        raise IndexError(f"Mark index {j} out of range for d={model.d}")
    post = mark_likelihood(as_belief(pi).pi, j, model)
    total = post.sum()
    if total <= 0.0:
        raise ImpossibleMark(f"Mark {model.marks[j]} has zero likelihood under the current belief")
    return Belief(post / total)


def jump_coefficient(pi: Belief | ArrayLike, j: int, model: SwitchingModel) -> NDArray[np.float64]:
    """Jump of the belief at an arrival with mark j, J_i = posterior_i - pi_i."""
    p = as_belief(pi)
    return jump_update(p, j, model).pi - p.pi


def flow_fixed_point(model: SwitchingModel) -> Belief:
    """Limit of x(t, pi) as t grows: the left Perron vector of Q - Lambda."""
    G = model.sub_generator
    values, vectors = np.linalg.eig(G.T)
    lead = int(np.argmax(values.real))
    vector = np.real(vectors[:, lead])
    if np.any(vector * vector.sum() < -1e-12):
        # repeated leading eigenvalue; fall back to the kernel of the shifted matrix
        vector = null_space(G.T - values[lead].real * np.eye(model.m))[:, 0]
    vector = np.abs(vector)
    return Belief(vector / vector.sum())


@dataclass(frozen=True)
class BeliefTrajectory:
    """Filtered belief on a time mesh plus the jump records at each arrival."""

    times: NDArray[np.float64]
    beliefs: NDArray[np.float64]
    arrivals: list[tuple[float, int]]
    left_limits: NDArray[np.float64]
    posteriors: NDArray[np.float64]

    def at(self, t: float) -> Belief:
        index = int(np.searchsorted(self.times, t, side="right")) - 1
        return Belief(self.beliefs[max(index, 0)])


def check_arrivals(
    arrivals: Sequence[tuple[float, int]], horizon: float, model: SwitchingModel
) -> None:
    last = -np.inf
    for sigma, j in arrivals:
        if not 0.0 <= sigma <= horizon:
            raise UnsortedArrivals(f"Arrival time {sigma} outside [0, {horizon}]")
        if sigma <= last:
            raise UnsortedArrivals(f"Arrival times must increase strictly: {sigma} after {last}")
        if not 0 <= j < model.d:
            raise IndexError(f"Mark index {j} out of range for d={model.d}")
        last = sigma


def filter_path(
    arrivals: Sequence[tuple[float, int]],
    pi0: Belief | ArrayLike,
    horizon: float,
    model: SwitchingModel,
    mesh: ArrayLike | None = None,
) -> BeliefTrajectory:
    """Run the filter along an observed arrival sequence.

    Beliefs on the mesh are right-continuous: a mesh point equal to an arrival time
    carries the posterior after the jump.
    """
    check_arrivals(arrivals, horizon, model)
    times = np.linspace(0.0, horizon, 201) if mesh is None else np.asarray(mesh, dtype=np.float64)
    if np.any(np.diff(times) < 0.0):
        raise UnsortedArrivals("Mesh must be sorted")
    beliefs = np.empty((times.shape[0], model.m))
    left_limits = np.empty((len(arrivals), model.m))
    posteriors = np.empty((len(arrivals), model.m))

    events = list(arrivals)
    anchor_time, anchor = 0.0, as_belief(pi0)
    cursor = 0
    for k, t in enumerate([*times, np.inf]):
        while cursor < len(events) and events[cursor][0] <= t:
            sigma, j = events[cursor]
            pre = flow_x(sigma - anchor_time, anchor, model)
            anchor_time, anchor = sigma, jump_update(pre, j, model)
            left_limits[cursor], posteriors[cursor] = pre.pi, anchor.pi
            cursor += 1
        if k < times.shape[0]:
            beliefs[k] = flow_x(t - anchor_time, anchor, model).pi
    return BeliefTrajectory(times, beliefs, events, left_limits, posteriors)
