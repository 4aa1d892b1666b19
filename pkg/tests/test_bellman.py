import math

import numpy as np
import pytest

from trackswitch.beliefgrid import NodeFunction, build_lattice
from trackswitch.bellman import (
    MONOTONE_SLACK,
    FirstJumpEngine,
    ValueSurface,
    apply_first_jump_L,
    intervene,
    jump_expectation_S,
    layer_residual,
    monotone_defect,
    noaction_exact,
    noaction_iterates,
    resolve_settings,
    restricted_iterates,
    solve_finite,
    solve_infinite,
    stationary_iterates,
    value_noaction_U0,
)
from trackswitch.errors import ArtifactError, MissingLayer, NoDiscount, SolverError
from trackswitch.filtering import jump_update, propagate_m
from trackswitch.models import SolverConfig
from trackswitch.problem import Belief, load_bundled, validate

SMALL = SolverConfig(grid=10, steps=40)


def two_state(**overrides):
    raw = {
        "states": ["1", "2"],
        "Q": [[-1.0, 1.0], [3.0, -3.0]],
        "lambda": [1.0, 4.0],
        "policies": ["1", "2"],
        "c": [[1.0, 0.0], [0.0, 1.0]],
        "K": 0.05,
        "rho": 0.0,
    }
    raw.update(overrides)
    return validate(raw)


@pytest.fixture
def onoff():
    return load_bundled("onoff")


@pytest.fixture(scope="module")
def onoff_solution():
    return solve_finite(1.0, load_bundled("onoff"), SMALL)


def test_resolve_settings_finite(onoff):
    """Test derived mesh and tolerance defaults for a finite horizon."""
    settings = resolve_settings(onoff, SolverConfig(grid=8, steps=50), 2.0)
    assert settings.steps == 50
    assert settings.dt == pytest.approx(0.04)
    assert settings.sweep_cap == 2
    assert settings.eps_switch == pytest.approx(1e-6 * 2.0)


def test_resolve_settings_default_eps_fix(onoff):
    """Test that the fixed-point tolerance scales with the value bound."""
    finite = resolve_settings(onoff, SolverConfig(grid=8, steps=50), 2.0)
    assert finite.eps_fix == pytest.approx(1e-4 * onoff.value_bound(2.0))
    callcenter = load_bundled("callcenter")
    stationary = resolve_settings(callcenter, SolverConfig(grid=4), None)
    assert stationary.eps_fix == pytest.approx(1e-4 * callcenter.value_bound(None))
    assert stationary.eps_fix == pytest.approx(1e-4 * callcenter.rate_bound / callcenter.rho)


def test_resolve_settings_snaps_dt(onoff):
    """Test that dt is adjusted so the horizon is a whole number of steps."""
    settings = resolve_settings(onoff, SolverConfig(grid=8, dt=0.3), 1.0)
    assert settings.steps == 3
    assert settings.dt * settings.steps == pytest.approx(1.0)


def test_resolve_settings_stationary_needs_discount(onoff):
    """Test that the stationary problem refuses rho = 0."""
    with pytest.raises(NoDiscount):
        resolve_settings(onoff, None, None)


def test_intervene_two_policies(onoff):
    """Test the intervention operator on a hand example."""
    lattice = build_lattice(2, 4)
    layer = NodeFunction(lattice, np.column_stack([np.zeros(5), np.full(5, 0.5)]))
    value, target = intervene(layer, [0.3, 0.7], 0, onoff)
    assert value == pytest.approx(0.45)
    assert target == 1


def test_intervene_zero_function(onoff):
    """Test that switching from nothing to nothing costs K."""
    layer = NodeFunction(build_lattice(2, 4), np.zeros((5, 2)))
    value, target = intervene(layer, [0.5, 0.5], 1, onoff)
    assert value == pytest.approx(-0.05)
    assert target == 0


def test_intervene_ties_pick_smallest_index():
    """Test that ties between targets resolve to the smallest policy index."""
    fed = load_bundled("fed")
    layer = NodeFunction(build_lattice(3, 2), np.ones((6, 3)))
    assert intervene(layer, Belief.uniform(3), 1, fed)[1] == 0
    assert intervene(layer, Belief.uniform(3), 0, fed)[1] == 1


def test_jump_expectation_of_constant():
    """Test that S maps constants to constants."""
    callcenter = load_bundled("callcenter")
    layer = NodeFunction(build_lattice(3, 6), np.ones((28, 2)))
    for i in range(3):
        assert jump_expectation_S(layer, i, [0.2, 0.3, 0.5], 0, callcenter) == pytest.approx(1.0)


def test_jump_expectation_hand_example():
    """Test S on a linear function with mark-dependent posteriors."""
    callcenter = load_bundled("callcenter")
    lattice = build_lattice(3, 12)
    layer = NodeFunction(lattice, np.column_stack([lattice.points[:, 2], lattice.points[:, 0]]))
    pi = Belief.uniform(3)
    expected = sum(callcenter.nu[0, j] * jump_update(pi, j, callcenter)[2] for j in range(3))
    assert jump_expectation_S(layer, 0, pi, 0, callcenter) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.46496, abs=1e-5)


def test_first_jump_single_step():
    """Test L at tau = dt with w = 0 and zero running benefit."""
    model = two_state(c=[[0.0, 0.0], [0.0, 0.0]], K=0.3, rho=0.2)
    lattice = build_lattice(2, 4)
    dt = 0.1
    layers = np.zeros((1, lattice.size, 2))
    node = 1
    s = propagate_m(dt, lattice.points[node], model).survival
    expected = -0.3 * s * math.exp(-0.2 * dt)
    value = apply_first_jump_L(layers, 1, node, 0, model, lattice, dt)
    assert value == pytest.approx(expected, abs=1e-12)


def test_first_jump_needs_lower_layers(onoff):
    """Test that L refuses to read layers that are not there."""
    lattice = build_lattice(2, 4)
    with pytest.raises(MissingLayer):
        apply_first_jump_L(np.zeros((1, 5, 2)), 3, 0, 0, onoff, lattice, 0.1)


def test_engine_matches_scalar_operator(onoff):
    """Test the vectorized first-jump operator against the term-by-term one."""
    config = SolverConfig(grid=6, steps=8)
    surface, _ = solve_finite(0.8, onoff, config)
    lattice, dt = surface.lattice, surface.dt
    engine = FirstJumpEngine(onoff, lattice, dt, 8)
    n = 5
    history = np.concatenate([surface.values[n - 1 : n], surface.values[n - 1 :: -1]])
    switch, _ = engine.apply(history, n, immediate=False)
    for node in (0, 2, 6):
        for a in range(2):
            scalar = apply_first_jump_L(surface, n, node, a, onoff, lattice, dt)
            assert switch[node, a] == pytest.approx(scalar, abs=1e-10)


def test_noaction_exact_constant_benefit():
    """Test the closed form for a constant benefit rate."""
    model = two_state(c=[[1.0, 1.0], [1.0, 1.0]], rho=0.5)
    expected = (1.0 - math.exp(-0.5 * 2.0)) / 0.5
    assert noaction_exact(2.0, [0.3, 0.7], 0, model) == pytest.approx(expected, rel=1e-12)


def test_noaction_exact_undiscounted(onoff):
    """Test that without arrival costs the closed form only needs the hidden chain."""
    # from state 1, P(state 1 at t) = 3/4 + exp(-4t)/4
    expected = 0.75 + (1.0 - math.exp(-4.0)) / 16.0
    assert noaction_exact(1.0, [1.0, 0.0], 0, onoff) == pytest.approx(expected, rel=1e-12)


def test_noaction_layers_match_closed_form():
    """Test the no-action surface against the closed form at the vertices."""
    model = load_bundled("onoff")
    config = SolverConfig(grid=20, steps=200)
    surface = value_noaction_U0(1.0, model, config)
    tolerance = model.lam_max * model.cmax * 1.0 * surface.dt
    for i in range(2):
        for a in range(2):
            exact = noaction_exact(1.0, Belief.vertex(2, i), a, model)
            assert abs(surface.values[-1, surface.lattice.vertex(i), a] - exact) <= tolerance


def test_noaction_constant_benefit_layers():
    """Test that a constant benefit rate gives c (1 - exp(-rho tau)) / rho on every node."""
    model = two_state(c=[[1.0, 1.0], [1.0, 1.0]], rho=0.5)
    surface = value_noaction_U0(1.0, model, SolverConfig(grid=6, steps=100))
    expected = (1.0 - math.exp(-0.5)) / 0.5
    assert np.allclose(surface.values[-1], expected, atol=model.lam_max * surface.dt)
    assert np.allclose(surface.values[0], 0.0)


def test_noaction_iterates_increase(onoff):
    """Test that the no-action iterates grow with the number of arrivals counted."""
    iterates = noaction_iterates(1.0, onoff, SolverConfig(grid=6, steps=20), iterations=4)
    assert len(iterates) == 5
    assert np.all(iterates[0].values == 0.0)
    for low, high in zip(iterates, iterates[1:]):
        assert np.all(high.values >= low.values - 1e-14)
    assert np.all(iterates[-1].values <= 1.01)


def test_prohibitive_switch_cost_gives_noaction():
    """Test that a switching cost above every possible gain reproduces U0."""
    model = two_state(K=10.0)
    surface, table = solve_finite(1.0, model, SMALL)
    noaction = value_noaction_U0(1.0, model, SMALL)
    assert np.array_equal(surface.values, noaction.values)
    assert not np.any(table.actions != -1)


def test_solution_dominates_noaction(onoff, onoff_solution):
    """Test U >= U0 on every layer."""
    surface, _ = onoff_solution
    noaction = value_noaction_U0(1.0, onoff, SMALL)
    assert np.all(surface.values >= noaction.values - 1e-12)


def test_solution_bounds(onoff_solution):
    """Test the uniform bound and zero terminal layer."""
    surface, _ = onoff_solution
    assert np.all(surface.values[0] == 0.0)
    assert np.max(np.abs(surface.values)) <= 1.01
    steps = np.max(np.abs(np.diff(surface.values, axis=0)))
    assert steps <= surface.dt * (1.0 + 4.0 * surface.dt)


def test_solution_switch_consistency(onoff_solution):
    """Test U(a) = U(b) - K wherever the table switches from a to b."""
    surface, table = onoff_solution
    n, node, a = np.nonzero(table.actions != -1)
    b = table.actions[n, node, a]
    assert n.size > 0
    net = surface.values[n, node, b] - 0.05
    assert np.all(np.abs(surface.values[n, node, a] - net) <= table.eps_switch)


def test_layer_residual_vanishes(onoff_solution):
    """Test that reapplying the layer update changes nothing."""
    surface, _ = onoff_solution
    assert layer_residual(surface) <= 1e-9


def test_restricted_switches_increase(onoff):
    """Test W_0 = U0 and unclipped W_k nondecreasing in the number of allowed switches."""
    config = SolverConfig(grid=6, steps=20)
    restricted = [w.values for w in restricted_iterates(1.0, onoff, config, iterations=3)]
    assert np.array_equal(restricted[0], value_noaction_U0(1.0, onoff, config).values)
    for low, high in zip(restricted, restricted[1:]):
        assert monotone_defect(low, high) <= 1e-12
    assert np.max(restricted[1] - restricted[0]) > 1e-3
    capped, _ = solve_finite(1.0, onoff, config, max_switches=3)
    assert np.array_equal(capped.values, restricted[3])


def test_monotone_defect():
    """Test the largest decrease between two iterates."""
    low = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert monotone_defect(low, low + 0.5) == 0.0
    assert monotone_defect(low, low - np.array([[0.0, 0.25], [0.0, 0.0]])) == 0.25


def test_stationary_constant_benefit():
    """Test V = c / rho when switching never pays."""
    model = two_state(c=[[1.0, 1.0], [1.0, 1.0]], K=10.0, rho=0.5, **{"lambda": [1.0, 2.0]})
    surface, table = solve_infinite(model, SolverConfig(grid=4, dt=0.02, eps_fix=1e-6))
    assert surface.stationary
    assert surface.n_layers == 1
    assert np.allclose(surface.values[0], 2.0, atol=0.01)
    assert not np.any(table.actions != -1)


def test_stationary_needs_discount(onoff):
    """Test that solve_infinite refuses an undiscounted model."""
    with pytest.raises(NoDiscount):
        solve_infinite(onoff, SMALL)


def test_surface_lookup(onoff_solution):
    """Test layer selection and interpolated values."""
    surface, _ = onoff_solution
    assert surface.n_layers == 41
    assert surface.layer_index(0.5) == 20
    assert surface.layer_index(0.5124) == 20
    assert surface.value(0.0, [0.5, 0.5], 0) == 0.0
    with pytest.raises(MissingLayer):
        surface.layer(41)


def test_surface_npz_roundtrip(tmp_path, onoff, onoff_solution):
    """Test that a cached surface reloads for the same model only."""
    surface, _ = onoff_solution
    path = tmp_path / "surface.npz"
    surface.to_npz(path)
    loaded = ValueSurface.from_npz(path, onoff)
    assert np.array_equal(loaded.values, surface.values)
    assert loaded.horizon == pytest.approx(1.0)
    with pytest.raises(ArtifactError, match="different model"):
        ValueSurface.from_npz(path, two_state(K=0.07))


def test_surface_frame(onoff_solution):
    """Test the long-format value table."""
    surface, _ = onoff_solution
    frame = surface.to_frame()
    assert list(frame.columns) == ["tau", "node", "pi_1", "pi_2", "policy", "value"]
    assert frame.shape[0] == 41 * 11 * 2


def test_solution_is_convex_in_belief(onoff_solution):
    """Test that every two-state layer is convex along pi_1."""
    surface, _ = onoff_solution
    order = np.argsort(surface.lattice.points[:, 0])
    values = surface.values[:, order, :]
    second = values[:, :-2, :] + values[:, 2:, :] - 2.0 * values[:, 1:-1, :]
    assert np.min(second) >= -1e-10


def test_coarse_mesh_is_refused(onoff):
    """Test that the layer fixed point needs dt * lambda_max / 2 below one."""
    with pytest.raises(SolverError, match="too coarse"):
        solve_finite(1.0, onoff, SolverConfig(grid=4, dt=0.5))


def test_stationary_iterates_increase():
    """Test that unclipped stationary iterates never decrease."""
    callcenter = load_bundled("callcenter")
    config = SolverConfig(grid=4, dt=0.05)
    iterates = [w.values for w in stationary_iterates(callcenter, config, iterations=3)]
    assert len(iterates) == 4
    slack = MONOTONE_SLACK * callcenter.value_bound(None)
    for low, high in zip(iterates, iterates[1:]):
        assert monotone_defect(low, high) <= slack
    assert np.max(iterates[1] - iterates[0]) > 1e-3


@pytest.fixture(scope="module")
def callcenter_horizons():
    callcenter = load_bundled("callcenter")
    config = SolverConfig(grid=4, dt=0.05, eps_fix=1e-6, max_iterations=2000)
    stationary, _ = solve_infinite(callcenter, config)
    finite = {T: solve_finite(T, callcenter, config)[0] for T in (4.0, 6.0, 8.0)}
    return stationary, finite


def test_finite_horizons_approach_stationary_value(callcenter_horizons):
    """Test that |V - U_T| shrinks like exp(-rho T)."""
    stationary, finite = callcenter_horizons
    horizons = sorted(finite)
    gaps = [float(np.max(np.abs(finite[T].values[-1] - stationary.values[0]))) for T in horizons]
    assert gaps[0] > gaps[1] > gaps[2]
    rate = -np.polyfit(horizons, np.log(gaps), 1)[0]
    assert rate >= 0.45


def test_stationary_solution_is_a_fixed_point(callcenter_horizons):
    """Test that one more stationary step moves V by little more than eps_fix."""
    stationary, _ = callcenter_horizons
    assert layer_residual(stationary) <= 1e-5
