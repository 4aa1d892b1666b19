"""Dynamic programming on the belief lattice: intervention, first-jump operator and solvers.

Layer n of a ValueSurface holds U(n dt, pi, a) on every lattice node, n = 0 being zero
remaining horizon. The first-jump operator conditions on the first arrival: with policy a
kept until a deadline t, the controller collects the running benefit while no arrival
occurs, receives the expected continuation S_i W at an arrival, and switches optimally
at the deadline if no arrival came first. Every term is a deterministic function of the
flow x(u, pi) and the survival mass s(u, pi), so the operator is evaluated on the mesh
u = 0, dt, ..., with composite trapezoid quadrature.

The jump term at u = 0 reads the layer being computed. Each layer is therefore the fixed
point of a map with contraction factor dt * lambda_max / 2, found by a few cheap
iterations that only touch the u = 0 block.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
import itertools
import logging
import math
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd
from scipy import sparse
from scipy.linalg import expm
from scipy.sparse.linalg import splu

from .beliefgrid import (
    NodeFunction,
    SimplexLattice,
    build_lattice,
    default_resolution,
    interpolate,
    interpolation_weights,
)
from .errors import ArtifactError, MaxIterations, MissingLayer, NoDiscount, SolverError
from .filtering import FlowCache, jump_update, mark_likelihood
from .models import SolverConfig
from .problem import Belief, SwitchingModel, as_belief, cost_K, model_hash, switch_cost_table

if TYPE_CHECKING:
    from .strategy import StrategyTable

logger = logging.getLogger(__name__)

SURFACE_FORMAT_VERSION = 1
LAYER_TOLERANCE = 1e-9
# relative to max(1, value bound)
IMPLICIT_TOLERANCE = 1e-14
MONOTONE_SLACK = 1e-9
MAX_IMPLICIT_ITERATIONS = 1000


@dataclass(frozen=True)
class SolverSettings:
    """Concrete numerical parameters after defaults are filled in."""

    dt: float
    steps: int
    grid: int
    eps_fix: float
    max_iterations: int
    sweep_cap: int
    eps_switch: float
    node_cap: int
    horizon: float | None

    @property
    def layers(self) -> int:
        return self.steps


def resolve_settings(
    model: SwitchingModel, config: SolverConfig | None, horizon: float | None
) -> SolverSettings:
    """Fill solver defaults: dt = T/steps, N by dimension, eps_fix = 1e-4 * value bound.

    The benefit rate bound `rate_bound` (running rate plus expected arrival benefit)
    plays the role of cmax, so the stationary default is eps_fix = 1e-4 * rate / rho.
    With horizon=None the stationary problem is set up on the effective horizon
    T_eff = ln(rate / (rho * eps_fix)) / rho, beyond which discounting makes every
    remaining contribution smaller than eps_fix.
    """
    config = config or SolverConfig()
    grid = config.grid or default_resolution(model.m)
    sweep_cap = config.sweep_cap or model.n_policies
    rate = model.rate_bound or 1.0
    if horizon is None:
        if model.rho <= 0.0:
            raise NoDiscount("The stationary problem needs a positive discount rate")
        eps_fix = config.eps_fix or 1e-4 * rate / model.rho
        span = max(math.log(max(rate / (model.rho * eps_fix), math.e)) / model.rho, 1e-6)
        eps_switch = config.eps_switch or 1e-6 * max(1.0, model.cmax / model.rho)
    else:
        if horizon <= 0.0:
            raise SolverError(f"Horizon must be positive, got {horizon}")
        span = horizon
        eps_fix = config.eps_fix or 1e-4 * (model.value_bound(horizon) or 1.0)
        eps_switch = config.eps_switch or 1e-6 * max(1.0, model.cmax * horizon)
    dt = config.dt or span / config.steps
    steps = max(1, int(round(span / dt)))
    if horizon is not None and abs(steps * dt - horizon) > LAYER_TOLERANCE * max(1.0, horizon):
        logger.warning(
            "Horizon %g is not a multiple of dt=%g; using dt=%g", horizon, dt, horizon / steps
        )
    dt = span / steps
    return SolverSettings(
        dt=dt,
        steps=steps,
        grid=grid,
        eps_fix=eps_fix,
        max_iterations=config.max_iterations,
        sweep_cap=sweep_cap,
        eps_switch=eps_switch,
        node_cap=config.node_cap,
        horizon=horizon,
    )


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Value table over (layer, node, policy).

    Finite-horizon surfaces hold layers tau = 0, dt, ..., T; a stationary surface holds
    a single layer and `horizon` is None.
    """

    model: SwitchingModel
    lattice: SimplexLattice
    dt: float
    values: NDArray[np.float64]
    horizon: float | None
    settings: SolverSettings | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != (self.lattice.size, self.model.n_policies):
            raise SolverError(f"Value array has shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def stationary(self) -> bool:
        return self.horizon is None

    @property
    def n_layers(self) -> int:
        return int(self.values.shape[0])

    @property
    def taus(self) -> NDArray[np.float64]:
        if self.stationary:
            return np.array([np.inf])
        return np.arange(self.n_layers) * self.dt

    def layer(self, n: int) -> NodeFunction:
        if not -self.n_layers <= n < self.n_layers:
            raise MissingLayer(f"Layer {n} not available (have {self.n_layers})")
        return NodeFunction(self.lattice, self.values[n])

    def layer_index(self, tau: float) -> int:
        """Nearest layer at or below tau (acts on slightly less remaining time)."""
        if self.stationary:
            return 0
        return int(min(max(math.floor(tau / self.dt + LAYER_TOLERANCE), 0), self.n_layers - 1))

    def value(self, tau: float | None, pi: Belief | ArrayLike, a: int) -> float:
        n = 0 if tau is None else self.layer_index(tau)
        return interpolate(self.layer(n), pi, a)

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for n, tau in enumerate(self.taus):
            frame = self.layer(n).to_frame(self.model.policies)
            frame.insert(0, "tau", tau)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)

    def to_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def to_npz(self, path: Path) -> None:
        np.savez_compressed(
            path,
            version=np.int64(SURFACE_FORMAT_VERSION),
            model_hash=np.str_(model_hash(self.model)),
            grid=np.int64(self.lattice.N),
            dt=np.float64(self.dt),
            horizon=np.float64(np.nan if self.horizon is None else self.horizon),
            values=self.values,
        )

    @classmethod
    def from_npz(cls, path: Path, model: SwitchingModel) -> ValueSurface:
        """Reload a cached surface, refusing caches built for another model or format."""
        if not path.exists():
            raise ArtifactError(f"Missing solve artifact: {path}")
        with np.load(path, allow_pickle=False) as data:
            if int(data["version"]) != SURFACE_FORMAT_VERSION:
                raise ArtifactError(f"Unsupported surface format {int(data['version'])} in {path}")
            if str(data["model_hash"]) != model_hash(model):
                raise ArtifactError(f"{path} was solved for a different model")
            horizon = float(data["horizon"])
            return cls(
                model=model,
                lattice=build_lattice(model.m, int(data["grid"]), node_cap=10**9),
                dt=float(data["dt"]),
                values=np.array(data["values"]),
                horizon=None if math.isnan(horizon) else horizon,
            )


def intervention_table(
    values: NDArray[np.float64], costs: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """Mw and its smallest maximizer for every row.

    values has shape (..., |A|) and costs shape (..., |A|, |A|) with costs[..., a, b] =
    K(a, b, pi). Returns (best, target) of shape (..., |A|).
    """
    n = values.shape[-1]
    net = values[..., None, :] - costs
    net = np.where(np.eye(n, dtype=bool), -np.inf, net)
    target = np.argmax(net, axis=-1)
    best = np.take_along_axis(net, target[..., None], axis=-1)[..., 0]
    return best, target


def intervene(
    layer: NodeFunction, pi: Belief | ArrayLike, a: int, model: SwitchingModel
) -> tuple[float, int]:
    """Best value reachable by one immediate switch from policy a, and the policy achieving it."""
    belief = as_belief(pi)
    w = layer.at(belief.pi[None, :])[0]
    net = [(w[b] - cost_K(model, a, b, belief), b) for b in range(model.n_policies) if b != a]
    best = max(value for value, _ in net)
    target = min(b for value, b in net if value == best)
    return float(best), target


def jump_expectation_S(
    layer: NodeFunction, i: int, pi: Belief | ArrayLike, a: int, model: SwitchingModel
) -> float:
    """S_i w: expected value of w after an arrival whose mark is drawn from state i.

    Marks with zero likelihood under pi cannot occur and contribute nothing.
    """
    belief = as_belief(pi)
    total = 0.0
    for j in range(model.d):
        if model.nu[i, j] == 0.0 or mark_likelihood(belief.pi, j, model).sum() <= 0.0:
            continue
        total += model.nu[i, j] * interpolate(layer, jump_update(belief, j, model), a)
    return total


def _leading_block(matrix: sparse.csr_matrix, rows: int, cols: int) -> sparse.csr_matrix:
    # rows of a block-diagonal CSR matrix only reference columns of earlier blocks
    end = matrix.indptr[rows]
    return sparse.csr_matrix(
        (matrix.data[:end], matrix.indices[:end], matrix.indptr[: rows + 1]), shape=(rows, cols)
    )


class FirstJumpEngine:
    """Precomputed flow, quadrature weights and interpolation operators for one mesh.

    Row block k of the block-diagonal operators corresponds to the mesh time u_k = k dt
    and reads history block k, the value layer with k fewer steps remaining.
    """

    def __init__(
        self, model: SwitchingModel, lattice: SimplexLattice, dt: float, steps: int
    ) -> None:
        self.model = model
        self.lattice = lattice
        self.dt = dt
        self.steps = steps
        nodes = lattice.size
        self.flow = FlowCache(model, dt)
        x, s = self.flow.trajectory(lattice.points, steps)
        discount = np.exp(-model.rho * dt * np.arange(steps + 1))
        self.weight = discount[:, None] * s
        self.running = self.weight[:, :, None] * (x @ model.reward_rate)
        self.costs = switch_cost_table(model, x.reshape(-1, model.m)).reshape(
            steps + 1, nodes, model.n_policies, model.n_policies
        )
        self.flow_operator = self._block_operator([x], [np.ones((steps + 1, nodes))])
        posteriors, likelihood = [], []
        for j in range(model.d):
            post = mark_likelihood(x, j, model)
            mass = post.sum(axis=2)
            normalized = post / np.where(mass > 0.0, mass, 1.0)[:, :, None]
            safe = np.where(mass[:, :, None] > 0.0, normalized, x)
            posteriors.append(safe)
            likelihood.append(self.weight * mass)
        self.jump_operator = self._block_operator(posteriors, likelihood)
        self.start_operator = _leading_block(self.jump_operator, nodes, nodes)
        logger.debug(
            "Engine ready: %d nodes x %d steps, nnz flow=%d jump=%d",
            nodes,
            steps,
            self.flow_operator.nnz,
            self.jump_operator.nnz,
        )

    def _block_operator(
        self, targets: list[NDArray[np.float64]], scales: list[NDArray[np.float64]]
    ) -> sparse.csr_matrix:
        nodes = self.lattice.size
        rows, cols, data = [], [], []
        for k in range(self.steps + 1):
            offset = k * nodes
            for points, scale in zip(targets, scales):
                vertex, weights = interpolation_weights(self.lattice, points[k])
                rows.append(np.repeat(np.arange(nodes) + offset, self.lattice.m))
                cols.append(vertex.ravel() + offset)
                data.append((weights * scale[k][:, None]).ravel())
        size = (self.steps + 1) * nodes
        matrix = sparse.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        )
        matrix.sum_duplicates()
        matrix.eliminate_zeros()
        return matrix

    def integrals(self, jump: NDArray[np.float64], n: int) -> NDArray[np.float64]:
        """Trapezoid integrals from 0 to u_k, k = 0..n, of running benefit plus jump terms."""
        integrand = self.running[: n + 1] + jump
        out = np.zeros_like(integrand)
        out[1:] = np.cumsum(0.5 * self.dt * (integrand[1:] + integrand[:-1]), axis=0)
        return out

    def start_jump(self, layer: NDArray[np.float64]) -> NDArray[np.float64]:
        """Trapezoid share of the u = 0 jump term, which every deadline k >= 1 carries."""
        return 0.5 * self.dt * (self.start_operator @ layer)

    def keep_operator(self) -> tuple[NDArray[np.float64], sparse.csr_matrix]:
        """(R, A) such that keeping the policy to maturity is worth R + A w.

        Valid for a history that holds the same layer w in every block, as in the
        stationary problem.
        """
        nodes = self.lattice.size
        quadrature = np.full(self.steps + 1, self.dt)
        quadrature[[0, -1]] *= 0.5
        coo = self.jump_operator.tocoo()
        jumps = sparse.csr_matrix(
            (coo.data * quadrature[coo.row // nodes], (coo.row % nodes, coo.col % nodes)),
            shape=(nodes, nodes),
        )
        return np.tensordot(quadrature, self.running, axes=1), jumps

    def _integral(self, history: NDArray[np.float64], n: int) -> NDArray[np.float64]:
        if n > self.steps:
            raise MissingLayer(f"Engine covers {self.steps} steps, asked for {n}")
        nodes, n_policies = self.lattice.size, self.model.n_policies
        rows = (n + 1) * nodes
        jump = _leading_block(self.jump_operator, rows, rows) @ history.reshape(rows, n_policies)
        return self.integrals(jump.reshape(n + 1, nodes, n_policies), n)

    def apply(
        self,
        history: NDArray[np.float64],
        n: int,
        immediate: bool,
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """First-jump operator on all nodes for horizon n dt.

        history has shape (n + 1, nodes, |A|); block k is the layer read at mesh time u_k.
        Returns (switch, maturity): the sup over deadlines t_k (k >= 1, or k >= 0 when
        `immediate`) of the switch-at-deadline branch, and the branch that keeps the
        policy until maturity.
        """
        integral = self._integral(history, n)
        nodes, n_policies = self.lattice.size, self.model.n_policies
        rows = (n + 1) * nodes
        stacked = history.reshape(rows, n_policies)
        first = 0 if immediate else 1
        if n < first:
            return np.full((nodes, n_policies), -np.inf), integral[n]
        flowed = _leading_block(self.flow_operator, rows, rows) @ stacked
        flowed = flowed.reshape(n + 1, nodes, n_policies)
        switched, _ = intervention_table(flowed[first:], self.costs[first : n + 1])
        candidates = self.weight[first : n + 1, :, None] * switched + integral[first:]
        return candidates.max(axis=0), integral[n]


def _sweep(
    values: NDArray[np.float64], costs: NDArray[np.float64], cap: int
) -> NDArray[np.float64]:
    """Resolve the t = 0 coupling: U <- max(U, MU) until nothing changes."""
    for _ in range(cap + 1):
        best, _ = intervention_table(values, costs)
        updated = np.maximum(values, best)
        if np.array_equal(updated, values):
            return values
        values = updated
    return values


@dataclass
class _Problem:
    model: SwitchingModel
    settings: SolverSettings
    lattice: SimplexLattice
    engine: FirstJumpEngine
    node_costs: NDArray[np.float64]

    @property
    def scale(self) -> float:
        return max(1.0, self.model.value_bound(self.settings.horizon))


def _setup(model: SwitchingModel, config: SolverConfig | None, horizon: float | None) -> _Problem:
    settings = resolve_settings(model, config, horizon)
    if horizon is not None and 0.5 * settings.dt * model.lam_max >= 1.0:
        raise SolverError(
            f"dt={settings.dt:g} is too coarse for lambda_max={model.lam_max:g}; "
            f"use dt < {2.0 / model.lam_max:g}"
        )
    lattice = build_lattice(model.m, settings.grid, node_cap=settings.node_cap)
    engine = FirstJumpEngine(model, lattice, settings.dt, settings.steps)
    return _Problem(model, settings, lattice, engine, switch_cost_table(model, lattice.points))


def _solve_layer(
    problem: _Problem, values: NDArray[np.float64], n: int, switching: bool = True
) -> NDArray[np.float64]:
    """Layer n from the layers below it.

    The u = 0 jump term reads layer n itself, so the layer is the fixed point of
    w -> sweep(base + start_jump(w)); without `switching` only the maturity branch counts.
    """
    engine = problem.engine
    history = np.concatenate([np.zeros_like(values[:1]), values[n - 1 :: -1]], axis=0)
    switch, maturity = engine.apply(history, n, immediate=False)
    base = np.maximum(switch, maturity) if switching else maturity
    tolerance = IMPLICIT_TOLERANCE * problem.scale
    layer = values[n - 1]
    for _ in range(MAX_IMPLICIT_ITERATIONS):
        update = base + engine.start_jump(layer)
        if switching:
            update = _sweep(update, problem.node_costs, problem.settings.sweep_cap)
        change = float(np.max(np.abs(update - layer)))
        layer = update
        if change <= tolerance:
            return layer
    raise MaxIterations(f"Layer {n} did not settle within {MAX_IMPLICIT_ITERATIONS} iterations")


def _noaction_layers(problem: _Problem) -> NDArray[np.float64]:
    steps = problem.settings.steps
    values = np.zeros((steps + 1, problem.lattice.size, problem.model.n_policies))
    for n in range(1, steps + 1):
        values[n] = _solve_layer(problem, values, n, switching=False)
    return values


def value_noaction_U0(
    T: float, model: SwitchingModel, config: SolverConfig | None = None
) -> ValueSurface:
    """Expected discounted benefit when the initial policy is kept until T, on every layer."""
    problem = _setup(model, config, T)
    values = _noaction_layers(problem)
    return ValueSurface(model, problem.lattice, problem.settings.dt, values, T, problem.settings)


def noaction_iterates(
    T: float, model: SwitchingModel, config: SolverConfig | None = None, iterations: int = 5
) -> list[ValueSurface]:
    """The sequence k_0 = 0, k_{n+1} = I k_n: benefit collected before the n-th arrival."""
    problem = _setup(model, config, T)
    steps = problem.settings.steps
    current = np.zeros((steps + 1, problem.lattice.size, model.n_policies))
    dt, settings = problem.settings.dt, problem.settings
    out = [ValueSurface(model, problem.lattice, dt, current, T, settings)]
    for _ in range(iterations):
        nxt = np.zeros_like(current)
        for n in range(1, steps + 1):
            _, nxt[n] = problem.engine.apply(current[n::-1], n, immediate=False)
        current = nxt
        out.append(ValueSurface(model, problem.lattice, dt, current, T, settings))
    return out


def noaction_exact(T: float, pi: Belief | ArrayLike, a: int, model: SwitchingModel) -> float:
    """Closed form of the no-action value.

    E[C(Pi_t, a)] = C(pi exp(tQ), a), so the value is the integral of
    exp(-rho t) pi exp(tQ) r_a with r_a the expected benefit rate; it is evaluated
    through the exponential of an augmented generator.
    """
    m = model.m
    augmented = np.zeros((m + 1, m + 1))
    augmented[:m, :m] = model.Q - model.rho * np.eye(m)
    augmented[:m, m] = model.reward_rate[:, a]
    block = expm(T * augmented)
    return float(as_belief(pi).pi @ block[:m, m])


def apply_first_jump_L(
    layers: NDArray[np.float64] | ValueSurface,
    n: int,
    node: int,
    a: int,
    model: SwitchingModel,
    lattice: SimplexLattice,
    dt: float,
) -> float:
    """First-jump operator at one node, evaluated term by term.

    Reads layers 0..n-1 only (the jump term at u = 0 uses layer n-1; the solvers use
    layer n there). The sup runs over deadlines t in {dt, ..., n dt}; at each deadline
    the policy is switched optimally.
    """
    table = layers.values if isinstance(layers, ValueSurface) else np.asarray(layers)
    if n < 1 or table.shape[0] < n:
        raise MissingLayer(f"Layers 0..{n - 1} are required, have {table.shape[0]}")
    cache = FlowCache(model, dt)
    pi = lattice.points[node]
    m_u = pi.copy()
    best = -np.inf
    integral = 0.0
    previous = None
    for k in range(n + 1):
        if k > 0:
            m_u = m_u @ cache.step
        s = float(m_u.sum())
        x = Belief(np.clip(m_u, 0.0, None) / s)
        discount = math.exp(-model.rho * k * dt)
        layer = NodeFunction(lattice, table[n - 1 if k == 0 else n - k])
        jump = sum(
            m_u[i] * model.lam[i] * jump_expectation_S(layer, i, x, a, model)
            for i in range(model.m)
        )
        value = discount * (float(m_u @ model.reward_rate[:, a]) + jump)
        if previous is not None:
            integral += 0.5 * dt * (previous + value)
        previous = value
        if k >= 1:
            best = max(best, discount * s * intervene(layer, x, a, model)[0] + integral)
    return best


def _finish(
    problem: _Problem, values: NDArray[np.float64], horizon: float | None
) -> tuple[ValueSurface, StrategyTable]:
    from .strategy import classify_regions

    settings = problem.settings
    surface = ValueSurface(problem.model, problem.lattice, settings.dt, values, horizon, settings)
    return surface, classify_regions(surface, problem.settings.eps_switch)


def solve_finite(
    T: float,
    model: SwitchingModel,
    config: SolverConfig | None = None,
    max_switches: int | None = None,
) -> tuple[ValueSurface, StrategyTable]:
    """Value surface and strategy table for horizons dt, 2 dt, ..., T.

    Layers are computed forward in remaining time. Layer n is the fixed point of the
    first-jump update over the layers below it and its own u = 0 jump term, with
    intervention sweeps closing the t = 0 case of the sup. With `max_switches` the
    restricted values W_0 = U_0, W_{k+1} = L W_k are returned instead.
    """
    problem = _setup(model, config, T)
    if max_switches is not None:
        *_, values = _restricted_sequence(problem, max_switches)
        return _finish(problem, values, T)
    steps = problem.settings.steps
    values = np.zeros((steps + 1, problem.lattice.size, model.n_policies))
    report = max(1, steps // 10)
    for n in range(1, steps + 1):
        values[n] = _solve_layer(problem, values, n)
        if n % report == 0:
            logger.info("Layer %d/%d done (tau=%.4g)", n, steps, n * problem.settings.dt)
    return _finish(problem, values, T)


def monotone_defect(previous: NDArray[np.float64], current: NDArray[np.float64]) -> float:
    """Largest decrease from one iterate to the next (0 for a nondecreasing pair)."""
    return float(np.max(previous - current, initial=0.0))


def _report_defect(
    problem: _Problem,
    label: str,
    k: int,
    previous: NDArray[np.float64],
    current: NDArray[np.float64],
) -> None:
    defect = monotone_defect(previous, current)
    if defect > MONOTONE_SLACK * problem.scale:
        logger.warning("%s iterate %d decreased by %.3g", label, k, defect)


def _restricted_sequence(problem: _Problem, iterations: int) -> Iterator[NDArray[np.float64]]:
    steps = problem.settings.steps
    current = _noaction_layers(problem)
    yield current
    for k in range(1, iterations + 1):
        nxt = np.zeros_like(current)
        for n in range(1, steps + 1):
            switch, maturity = problem.engine.apply(current[n::-1], n, immediate=True)
            nxt[n] = np.maximum(switch, maturity)
        _report_defect(problem, "Restricted", k, current, nxt)
        current = nxt
        yield current


def restricted_iterates(
    T: float, model: SwitchingModel, config: SolverConfig | None = None, iterations: int = 3
) -> list[ValueSurface]:
    """W_0 = U_0 and W_{k+1} = L W_k: values with at most k switches, unclipped."""
    problem = _setup(model, config, T)
    settings = problem.settings
    return [
        ValueSurface(model, problem.lattice, settings.dt, values, T, settings)
        for values in _restricted_sequence(problem, iterations)
    ]


def _stationary_noaction(problem: _Problem) -> NDArray[np.float64]:
    # keep-policy value on the stationary mesh: w = R + A w
    keep, jumps = problem.engine.keep_operator()
    system = sparse.identity(problem.lattice.size, format="csc") - jumps.tocsc()
    return np.asarray(splu(system).solve(keep))


def _stationary_sequence(problem: _Problem) -> Iterator[NDArray[np.float64]]:
    steps = problem.settings.steps
    current = _stationary_noaction(problem)
    yield current
    for k in itertools.count(1):
        history = np.broadcast_to(current, (steps + 1, *current.shape))
        switch, maturity = problem.engine.apply(history, steps, immediate=True)
        nxt = np.maximum(switch, maturity)
        _report_defect(problem, "Stationary", k, current, nxt)
        current = nxt
        yield current


def stationary_iterates(
    model: SwitchingModel, config: SolverConfig | None = None, iterations: int = 5
) -> list[ValueSurface]:
    """The first stationary iterates W_0, ..., W_iterations as single-layer surfaces."""
    if model.rho <= 0.0:
        raise NoDiscount("The stationary problem needs rho > 0")
    problem = _setup(model, config, None)
    settings = problem.settings
    return [
        ValueSurface(model, problem.lattice, settings.dt, values[None, :, :], None, settings)
        for values in itertools.islice(_stationary_sequence(problem), iterations + 1)
    ]


def solve_infinite(
    model: SwitchingModel, config: SolverConfig | None = None
) -> tuple[ValueSurface, StrategyTable]:
    """Stationary value V_rho by iterating the discounted first-jump operator from W_0.

    W_0 is the value of never switching on the stationary mesh. Iterates are not clipped;
    a decrease beyond the monotonicity slack is logged. Iteration stops once the sup-norm
    change drops below eps_fix.
    """
    if model.rho <= 0.0:
        raise NoDiscount("The stationary problem needs rho > 0")
    problem = _setup(model, config, None)
    sequence = _stationary_sequence(problem)
    current = next(sequence)
    limit = problem.settings.max_iterations
    for iteration, nxt in enumerate(itertools.islice(sequence, limit), start=1):
        change = float(np.max(np.abs(nxt - current)))
        current = nxt
        logger.info("Stationary iteration %d: sup-norm change %.3g", iteration, change)
        if change < problem.settings.eps_fix:
            return _finish(problem, current[None, :, :], None)
    raise MaxIterations(
        f"No convergence within {limit} iterations (eps_fix={problem.settings.eps_fix:g})"
    )


def layer_residual(surface: ValueSurface) -> float:
    """Largest change when every layer update is applied once more to the solved surface.

    Finite horizons recompute each layer from the stored layers, its own u = 0 term
    included; a stationary surface is mapped once more through the stationary operator.
    """
    settings = surface.settings
    if settings is None:
        raise SolverError("Surface carries no solver settings; residual needs the original mesh")
    model, lattice = surface.model, surface.lattice
    engine = FirstJumpEngine(model, lattice, settings.dt, settings.steps)
    values = np.array(surface.values)
    if surface.stationary:
        history = np.broadcast_to(values[0], (settings.steps + 1, *values[0].shape))
        switch, maturity = engine.apply(history, settings.steps, immediate=True)
        return float(np.max(np.abs(np.maximum(switch, maturity) - values[0])))
    costs = switch_cost_table(model, lattice.points)
    worst = 0.0
    for n in range(1, surface.n_layers):
        switch, maturity = engine.apply(values[n::-1], n, immediate=False)
        update = _sweep(np.maximum(switch, maturity), costs, settings.sweep_cap)
        worst = max(worst, float(np.max(np.abs(update - values[n]))))
    return worst
