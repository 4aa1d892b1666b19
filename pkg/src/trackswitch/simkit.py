"""Exact simulation of the hidden chain and its arrivals, and Monte Carlo strategy evaluation.

Policies only change the payoff, never the dynamics, so a path is simulated first and
the strategy is then driven along its filtered belief.
"""

from __future__ import annotations

from collections.abc import Sequence
import copy
from dataclasses import dataclass, field
import logging
import math

from joblib import Parallel, delayed
import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import expm

from .errors import InadmissibleStrategy
from .filtering import BeliefTrajectory, FlowCache, check_arrivals, filter_path, flow_x, jump_update
from .models import FilterCheckReport, McEstimate, SwitchRecord
from .problem import Belief, SwitchingModel, as_belief, model_hash
from .strategy import Controller, Strategy

logger = logging.getLogger(__name__)

DEFAULT_SCAN_STEPS = 400
BISECTION_FRACTION = 0.01


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based generator for one path; substreams are keyed by (seed, path index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_index])))


@dataclass
class SamplePath:
    """One realization: hidden chain, arrivals, applied switches and the discounted payoff."""

    seed: int
    path_index: int
    horizon: float
    chain_times: NDArray[np.float64]
    chain_states: NDArray[np.int64]
    arrivals: list[tuple[float, int]]
    initial_policy: int
    switches: list[SwitchRecord] = field(default_factory=list)
    running: float = 0.0
    arrival_benefit: float = 0.0
    switching_cost: float = 0.0
    payoff: float = 0.0

    def state_at(self, t: float) -> int:
        return int(self.chain_states[np.searchsorted(self.chain_times, t, side="right") - 1])

    def policy_before(self, t: float) -> int:
        """Policy in force just before t (switches at t not yet applied)."""
        policy = self.initial_policy
        for record in self.switches:
            if record.time >= t:
                break
            policy = record.target
        return policy

    def recompute_payoff(self, model: SwitchingModel) -> float:
        running, arrival, switching = payoff_components(model, self)
        return running + arrival - switching

    def to_text(self, model: SwitchingModel) -> str:
        """Line-oriented dump: header, then CHAIN/ARRIVAL/SWITCH events sorted by time."""
        events: list[tuple[float, int, str]] = []
        for t, state in zip(self.chain_times, self.chain_states):
            events.append((float(t), 0, f"CHAIN {float(t)!r} {model.states[int(state)]}"))
        for sigma, j in self.arrivals:
            events.append((sigma, 1, f"ARRIVAL {sigma!r} {float(model.marks[j])!r}"))
        for record in self.switches:
            source, target = model.policies[record.source], model.policies[record.target]
            events.append((record.time, 2, f"SWITCH {record.time!r} {source} {target}"))
        lines = [
            f"# seed={self.seed} path={self.path_index} model={model_hash(model)}",
            f"# horizon={self.horizon!r} policy={model.policies[self.initial_policy]}",
            *(text for _, _, text in sorted(events, key=lambda e: (e[0], e[1]))),
            f"PAYOFF {self.payoff!r}",
        ]
        return "\n".join(lines) + "\n"


def _simulate_chain(
    model: SwitchingModel, pi0: Belief, horizon: float, rng: np.random.Generator
) -> tuple[NDArray[np.float64], NDArray[np.int64], list[tuple[float, int]]]:
    state = int(rng.choice(model.m, p=pi0.pi))
    times, states = [0.0], [state]
    arrivals: list[tuple[float, int]] = []
    t = 0.0
    while True:
        rate = -float(model.Q[state, state])
        stay = rng.exponential(1.0 / rate) if rate > 0.0 else math.inf
        end = min(t + stay, horizon)
        # arrivals within the sojourn form a homogeneous Poisson stream
        s = t + rng.exponential(1.0 / model.lam[state])
        while s < end:
            arrivals.append((float(s), int(rng.choice(model.d, p=model.nu[state]))))
            s += rng.exponential(1.0 / model.lam[state])
        if t + stay >= horizon:
            break
        t += stay
        jump = np.clip(model.Q[state], 0.0, None)
        jump[state] = 0.0
        state = int(rng.choice(model.m, p=jump / rate))
        times.append(t)
        states.append(state)
    return np.asarray(times), np.asarray(states, dtype=np.int64), arrivals


def _discounted_length(rho: float, u: float, v: float) -> float:
    if rho == 0.0:
        return v - u
    return (math.exp(-rho * u) - math.exp(-rho * v)) / rho


def payoff_components(model: SwitchingModel, path: SamplePath) -> tuple[float, float, float]:
    """(running benefit, arrival benefit, switching cost), all discounted."""
    cuts = {0.0, path.horizon}
    cuts.update(float(t) for t in path.chain_times if t < path.horizon)
    cuts.update(r.time for r in path.switches if r.time < path.horizon)
    grid = sorted(cuts)
    running = 0.0
    policy, cursor = path.initial_policy, 0
    for u, v in zip(grid, grid[1:]):
        while cursor < len(path.switches) and path.switches[cursor].time <= u:
            policy = path.switches[cursor].target
            cursor += 1
        running += model.c[path.state_at(u), policy] * _discounted_length(model.rho, u, v)
    arrival = sum(
        math.exp(-model.rho * sigma) * model.c1[path.state_at(sigma), j, path.policy_before(sigma)]
        for sigma, j in path.arrivals
    )
    switching = sum(
        math.exp(-model.rho * r.time) * model.K[path.state_at(r.time), r.source, r.target]
        for r in path.switches
    )
    return float(running), float(arrival), float(switching)


def _settle(model: SwitchingModel, path: SamplePath) -> SamplePath:
    path.running, path.arrival_benefit, path.switching_cost = payoff_components(model, path)
    path.payoff = path.running + path.arrival_benefit - path.switching_cost
    return path


def simulate_system(
    model: SwitchingModel,
    pi0: Belief | ArrayLike,
    T: float,
    seed: int,
    path_index: int = 0,
    policy: int = 0,
) -> SamplePath:
    """Hidden chain and arrivals on [0, T]; the payoff is that of keeping `policy` throughout."""
    rng = path_rng(seed, path_index)
    times, states, arrivals = _simulate_chain(model, as_belief(pi0), T, rng)
    path = SamplePath(seed, path_index, T, times, states, arrivals, initial_policy=policy)
    return _settle(model, path)


@dataclass
class ControlRun:
    """Switches a strategy produced along an observed arrival sequence."""

    initial_policy: int
    switches: list[tuple[float, int, int, Belief]]

    @property
    def times(self) -> list[float]:
        return [t for t, _, _, _ in self.switches]


def default_scan_step(strategy: Strategy, horizon: float) -> float:
    if isinstance(strategy, Controller):
        return strategy.surface.dt
    return horizon / DEFAULT_SCAN_STEPS


def run_strategy(
    model: SwitchingModel,
    strategy: Strategy,
    pi0: Belief | ArrayLike,
    a0: int,
    horizon: float,
    arrivals: Sequence[tuple[float, int]],
    scan_step: float | None = None,
) -> ControlRun:
    """Drive a strategy along the filtered belief of a fixed arrival sequence.

    Between arrivals the gap is scanned on a grid of `scan_step`, closed by the left
    limit at the next arrival, and a sign change is refined by bisection to
    scan_step/100. At arrivals the strategy sees the posterior. At most one switch
    happens at any instant.
    """
    check_arrivals(arrivals, horizon, model)
    h = scan_step or default_scan_step(strategy, horizon)
    cache = FlowCache(model, h)
    strategy.reset(a0)
    run = ControlRun(a0, [])
    policy = a0

    def switch(t: float, pi: Belief, target: int) -> None:
        nonlocal policy
        if run.switches and t <= run.switches[-1][0]:
            return
        if target == policy or not 0 <= target < model.n_policies:
            raise InadmissibleStrategy(f"Invalid switch from {policy} to {target} at t={t}")
        strategy.notify_switch(t, policy, target)
        run.switches.append((t, policy, target, pi))
        policy = target

    def scan(start: float, belief: Belief, end: float) -> None:
        while end - start > 1e-12 * max(1.0, end):
            count = int(math.ceil((end - start) / h - 1e-12)) - 1
            x, _ = cache.trajectory(belief.pi[None, :], count)
            # mesh points strictly inside the segment, then the left limit at its end
            times = np.append(start + h * np.arange(1, count + 1), end)
            points = np.vstack([x[1:, 0, :], flow_x(end - start, belief, model).pi[None, :]])
            gaps = strategy.gap(points, times, policy)
            hits = np.flatnonzero(gaps <= 0.0)
            if hits.size == 0:
                return
            k = int(hits[0])
            lo, hi = (start if k == 0 else float(times[k - 1])), float(times[k])
            while hi - lo > BISECTION_FRACTION * h:
                mid = 0.5 * (lo + hi)
                trial = flow_x(mid - start, belief, model)
                if strategy.gap(trial.pi[None, :], np.array([mid]), policy)[0] <= 0.0:
                    hi = mid
                else:
                    lo = mid
            pi_hit = flow_x(hi - start, belief, model)
            switch(hi, pi_hit, strategy.target(pi_hit, hi, policy))
            start, belief = hi, pi_hit

    belief = as_belief(pi0)
    if strategy.gap(belief.pi[None, :], np.array([0.0]), policy)[0] <= 0.0:
        switch(0.0, belief, strategy.target(belief, 0.0, policy))
    anchor_time = 0.0
    for sigma, j in arrivals:
        scan(anchor_time, belief, sigma)
        belief = jump_update(flow_x(sigma - anchor_time, belief, model), j, model)
        anchor_time = sigma
        target = strategy.arrival_target(belief, sigma, policy)
        if target is not None and target != policy:
            switch(sigma, belief, target)
    scan(anchor_time, belief, horizon)
    return run


def replay_path(
    model: SwitchingModel,
    strategy: Strategy,
    pi0: Belief | ArrayLike,
    a0: int,
    arrivals: Sequence[tuple[float, int]],
    horizon: float,
    scan_step: float | None = None,
    mesh: ArrayLike | None = None,
) -> tuple[ControlRun, BeliefTrajectory]:
    """Controlled run and filtered belief along a given arrival sequence (no hidden chain)."""
    run = run_strategy(model, strategy, pi0, a0, horizon, arrivals, scan_step)
    return run, filter_path(arrivals, pi0, horizon, model, mesh=mesh)


def controlled_path(
    model: SwitchingModel,
    strategy: Strategy,
    pi0: Belief | ArrayLike,
    a0: int,
    T: float,
    seed: int,
    path_index: int,
    scan_step: float | None = None,
) -> SamplePath:
    """Simulate one path and apply the strategy along its filtered belief."""
    path = simulate_system(model, pi0, T, seed, path_index, policy=a0)
    run = run_strategy(model, strategy, pi0, a0, T, path.arrivals, scan_step)
    path.switches = [
        SwitchRecord(time=t, source=a, target=b, cost=float(model.K[path.state_at(t), a, b]))
        for t, a, b, _ in run.switches
    ]
    return _settle(model, path)


def _payoff_chunk(
    model: SwitchingModel,
    strategy: Strategy,
    pi0: Belief,
    a0: int,
    T: float,
    seed: int,
    indices: Sequence[int],
    scan_step: float | None,
) -> NDArray[np.float64]:
    local = copy.copy(strategy)
    return np.array(
        [controlled_path(model, local, pi0, a0, T, seed, i, scan_step).payoff for i in indices]
    )


def _chunks(paths: int, threads: int) -> list[range]:
    size = max(1, math.ceil(paths / max(threads, 1)))
    return [range(start, min(start + size, paths)) for start in range(0, paths, size)]


def evaluate_strategy(
    model: SwitchingModel,
    strategy: Strategy,
    pi0: Belief | ArrayLike,
    a0: int,
    T: float,
    paths: int,
    seed: int,
    threads: int = 1,
    scan_step: float | None = None,
) -> McEstimate:
    """Monte Carlo estimate of the expected discounted payoff of a strategy.

    Paths are split into contiguous chunks; payoffs are gathered in path order so the
    estimate does not depend on the number of workers.
    """
    if paths < 1:
        raise ValueError(f"Need at least one path, got {paths}")
    belief = as_belief(pi0)
    results = Parallel(n_jobs=threads)(
        delayed(_payoff_chunk)(model, strategy, belief, a0, T, seed, chunk, scan_step)
        for chunk in _chunks(paths, threads)
    )
    payoffs = np.concatenate(results)
    stderr = float(payoffs.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
    logger.info("Evaluated %d paths: mean %.6g (s.e. %.3g)", paths, payoffs.mean(), stderr)
    return McEstimate(mean=float(payoffs.mean()), stderr=stderr, count=paths, seed=seed)


def _belief_chunk(
    model: SwitchingModel,
    pi0: Belief,
    T: float,
    seed: int,
    indices: Sequence[int],
    mesh: NDArray[np.float64],
) -> NDArray[np.float64]:
    out = np.empty((len(indices), mesh.shape[0], model.m))
    for row, i in enumerate(indices):
        path = simulate_system(model, pi0, T, seed, i)
        out[row] = filter_path(path.arrivals, pi0, T, model, mesh=mesh).beliefs
    return out


def filter_consistency_check(
    model: SwitchingModel,
    pi0: Belief | ArrayLike,
    T: float,
    paths: int,
    seed: int,
    threads: int = 1,
) -> FilterCheckReport:
    """Compare the path average of Pi(t) with pi0 exp(tQ) at t = T/4, T/2, T."""
    belief = as_belief(pi0)
    checkpoints = np.array([T / 4.0, T / 2.0, T])
    results = Parallel(n_jobs=threads)(
        delayed(_belief_chunk)(model, belief, T, seed, chunk, checkpoints)
        for chunk in _chunks(paths, threads)
    )
    beliefs = np.concatenate(results)
    empirical = beliefs.mean(axis=0)
    stderr = np.zeros_like(empirical)
    if paths > 1:
        stderr = beliefs.std(axis=0, ddof=1) / math.sqrt(paths)
    expected = np.stack([belief.pi @ expm(t * model.Q) for t in checkpoints])
    deviation = np.abs(empirical - expected)
    zscore = np.where(stderr > 0.0, deviation / np.where(stderr > 0.0, stderr, 1.0), 0.0)
    return FilterCheckReport(
        checkpoints=checkpoints.tolist(),
        empirical=empirical.tolist(),
        expected=expected.tolist(),
        stderr=stderr.tolist(),
        max_deviation=float(deviation.max()),
        max_zscore=float(zscore.max()),
    )
