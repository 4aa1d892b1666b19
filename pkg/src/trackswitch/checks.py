"""Invariant suites run by `trackswitch check` at reduced scale."""

from __future__ import annotations

from collections.abc import Callable
import logging
import math

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import solve_ivp

from .bellman import (
    MONOTONE_SLACK,
    layer_residual,
    monotone_defect,
    noaction_exact,
    restricted_iterates,
    solve_finite,
    value_noaction_U0,
)
from .errors import TrackSwitchError
from .filtering import flow_drift, flow_x, propagate_m
from .models import CheckResult, SolverConfig
from .problem import Belief, SwitchingModel
from .simkit import filter_consistency_check
from .strategy import CONTINUE, StrategyTable

logger = logging.getLogger(__name__)

CHECK_GRID = {1: 1, 2: 40, 3: 12}
CHECK_STEPS = 40
CHECK_DRAWS = 100
CHECK_PATHS = 2000
MAX_ZSCORE = 4.0


def check_config(model: SwitchingModel) -> SolverConfig:
    return SolverConfig(grid=CHECK_GRID.get(model.m, 4), steps=CHECK_STEPS)


def _random_beliefs(rng: np.random.Generator, m: int, count: int) -> NDArray[np.float64]:
    return rng.dirichlet(np.ones(m), size=count)


def _semigroup(model: SwitchingModel, rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for pi in _random_beliefs(rng, model.m, CHECK_DRAWS):
        t, u = rng.uniform(0.0, 2.0, size=2)
        direct = flow_x(t + u, pi, model).pi
        chained = flow_x(u, flow_x(t, pi, model), model).pi
        worst = max(worst, float(np.max(np.abs(direct - chained))))
    return CheckResult(name="semigroup", passed=worst < 1e-8, detail=f"max deviation {worst:.3g}")


def _normalization(model: SwitchingModel, rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for pi in _random_beliefs(rng, model.m, CHECK_DRAWS):
        x = flow_x(float(rng.uniform(0.0, 5.0)), pi, model).pi
        worst = max(worst, abs(float(x.sum()) - 1.0), float(max(0.0, -x.min())))
    return CheckResult(name="normalization", passed=worst < 1e-10, detail=f"max defect {worst:.3g}")


def _ode_oracle(model: SwitchingModel, rng: np.random.Generator) -> CheckResult:
    G = model.sub_generator
    worst = 0.0
    for pi in [Belief.uniform(model.m).pi, *_random_beliefs(rng, model.m, 3)]:
        solution = solve_ivp(
            lambda _, y: y @ G,
            (0.0, 5.0),
            pi,
            method="DOP853",
            t_eval=[0.1, 1.0, 5.0],
            rtol=1e-12,
            atol=1e-14,
        )
        for k, t in enumerate(solution.t):
            m = propagate_m(float(t), pi, model).m
            worst = max(worst, float(np.max(np.abs(m - solution.y[:, k]))))
    return CheckResult(name="ode-oracle", passed=worst < 1e-8, detail=f"max deviation {worst:.3g}")


def _survival(model: SwitchingModel, rng: np.random.Generator) -> CheckResult:
    failures = 0
    for pi in _random_beliefs(rng, model.m, CHECK_DRAWS):
        t = float(rng.uniform(0.0, 2.0))
        s = propagate_m(t, pi, model).survival
        if not math.exp(-model.lam_max * t) - 1e-12 <= s <= math.exp(-model.lam_min * t) + 1e-12:
            failures += 1
    return CheckResult(
        name="survival-bounds", passed=failures == 0, detail=f"{failures} violations"
    )


def _drift(model: SwitchingModel, rng: np.random.Generator) -> CheckResult:
    beliefs = _random_beliefs(rng, model.m, CHECK_DRAWS)
    worst = max(abs(float(flow_drift(pi, model).sum())) for pi in beliefs)
    return CheckResult(
        name="drift-tangent", passed=worst < 1e-12, detail=f"max |sum mu| {worst:.3g}"
    )


def _tower(model: SwitchingModel, seed: int, threads: int) -> CheckResult:
    report = filter_consistency_check(
        model, Belief.uniform(model.m), 1.0, CHECK_PATHS, seed, threads
    )
    return CheckResult(
        name="tower-property",
        passed=report.max_zscore < MAX_ZSCORE,
        detail=f"max deviation {report.max_deviation:.3g}, max z {report.max_zscore:.2f}",
    )


def _convexity_violation(values: NDArray[np.float64], table: StrategyTable) -> float:
    lattice = table.surface.lattice
    counts = lattice.counts
    worst = 0.0
    for r in range(lattice.m):
        for s in range(r + 1, lattice.m):
            inner = (counts[:, r] > 0) & (counts[:, s] > 0)
            if not inner.any():
                continue
            k = counts[inner]
            forward, backward = k.copy(), k.copy()
            forward[:, r] += 1
            forward[:, s] -= 1
            backward[:, r] -= 1
            backward[:, s] += 1
            mid = values[:, inner]
            ahead = values[:, lattice.index_of(forward)]
            behind = values[:, lattice.index_of(backward)]
            chord = 0.5 * (ahead + behind)
            worst = max(worst, float(np.max(mid - chord)))
    return worst


def _solver_checks(model: SwitchingModel, horizon: float) -> list[CheckResult]:
    config = check_config(model)
    surface, table = solve_finite(horizon, model, config)
    bound = model.value_bound(horizon)
    scale = max(1.0, model.rate_bound * horizon)
    values = surface.values
    # relative error of the mesh recursion
    slack = model.lam_max * surface.dt
    # interpolated posteriors make the mesh recursion first order in dt
    mesh_error = model.lam_max * scale * surface.dt
    results = [
        CheckResult(
            name="uniform-bound",
            passed=bool(np.all(np.abs(values) <= bound * (1 + slack) + 1e-12)),
            detail=f"max |U| {np.max(np.abs(values)):.6g} vs bound {bound:.6g}",
        )
    ]
    steps = np.max(np.abs(np.diff(values, axis=0)))
    limit = model.rate_bound * surface.dt * (1 + slack) + 1e-9
    results.append(
        CheckResult(
            name="lipschitz-in-horizon",
            passed=bool(steps <= limit),
            detail=f"{steps:.3g} vs {limit:.3g}",
        )
    )
    eps_grid = 4.0 * model.rate_bound * horizon / surface.lattice.N
    violation = _convexity_violation(values, table) if model.m > 1 else 0.0
    results.append(
        CheckResult(
            name="convexity",
            passed=violation <= eps_grid,
            detail=f"{violation:.3g} vs {eps_grid:.3g}",
        )
    )
    residual = layer_residual(surface)
    results.append(
        CheckResult(
            name="fixed-point-residual", passed=residual <= 1e-9 * scale, detail=f"{residual:.3g}"
        )
    )
    switching = table.actions != CONTINUE
    n, node, a = np.nonzero(switching)
    b = table.actions[switching]
    net = values[n, node, b] - np.einsum("ki,ik->k", surface.lattice.points[node], model.K[:, a, b])
    mismatch = float(np.max(np.abs(values[n, node, a] - net))) if n.size else 0.0
    results.append(
        CheckResult(
            name="switch-consistency",
            passed=mismatch <= table.eps_switch,
            detail=f"{n.size} switch entries, {mismatch:.3g}",
        )
    )
    noaction = value_noaction_U0(horizon, model, config)
    gap = 0.0
    for i in range(model.m):
        vertex = surface.lattice.vertex(i)
        for policy in range(model.n_policies):
            exact = noaction_exact(horizon, Belief.vertex(model.m, i), policy, model)
            gap = max(gap, abs(float(noaction.values[-1, vertex, policy]) - exact))
    results.append(
        CheckResult(
            name="no-action-closed-form",
            passed=gap <= mesh_error,
            detail=f"max gap {gap:.3g} vs {mesh_error:.3g}",
        )
    )
    dominated = float(np.min(values[-1] - noaction.values[-1]))
    results.append(
        CheckResult(
            name="dominates-no-action",
            passed=dominated >= -1e-9 * scale,
            detail=f"min U - U0 {dominated:.3g}",
        )
    )
    iterates = [w.values for w in restricted_iterates(horizon, model, config, iterations=2)]
    defect = max(monotone_defect(low, high) for low, high in zip(iterates, iterates[1:]))
    results.append(
        CheckResult(
            name="monotone-switch-iterates",
            passed=defect <= MONOTONE_SLACK * scale,
            detail=f"largest decrease {defect:.3g}",
        )
    )
    return results


def run_checks(
    model: SwitchingModel, seed: int = 0, threads: int = 1, horizon: float = 1.0
) -> list[CheckResult]:
    """Run every invariant suite; a suite that raises is reported as failed."""
    rng = np.random.default_rng(seed)
    suites: list[tuple[str, Callable[[], list[CheckResult]]]] = [
        ("semigroup", lambda: [_semigroup(model, rng)]),
        ("normalization", lambda: [_normalization(model, rng)]),
        ("ode-oracle", lambda: [_ode_oracle(model, rng)]),
        ("survival-bounds", lambda: [_survival(model, rng)]),
        ("drift-tangent", lambda: [_drift(model, rng)]),
        ("solver", lambda: _solver_checks(model, horizon)),
        ("tower-property", lambda: [_tower(model, seed, threads)]),
    ]
    results: list[CheckResult] = []
    for name, suite in suites:
        try:
            results.extend(suite())
        except TrackSwitchError as e:
            results.append(CheckResult(name=name, passed=False, detail=f"{type(e).__name__}: {e}"))
        logger.info("Suite %s finished", name)
    return results
