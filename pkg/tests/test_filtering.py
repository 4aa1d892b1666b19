import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from trackswitch.errors import ImpossibleMark, NegativeTime, UnsortedArrivals
from trackswitch.filtering import (
    FlowCache,
    filter_path,
    flow_drift,
    flow_fixed_point,
    flow_x,
    jump_coefficient,
    jump_update,
    propagate_m,
)
from trackswitch.problem import Belief, load_bundled, validate


@pytest.fixture
def onoff():
    return load_bundled("onoff")


@pytest.fixture
def callcenter():
    return load_bundled("callcenter")


@pytest.fixture
def single_state():
    return validate(
        {
            "states": ["x"],
            "Q": [[0.0]],
            "lambda": [2.0],
            "policies": ["a", "b"],
            "c": [[1.0, 0.0]],
            "K": 0.1,
        }
    )


def test_propagate_at_zero(onoff):
    """Test that m(0, pi) = pi with unit survival."""
    m = propagate_m(0.0, [0.3, 0.7], onoff)
    assert np.allclose(m.m, [0.3, 0.7])
    assert m.survival == 1.0


def test_propagate_single_state(single_state):
    """Test the survival of a Poisson process with rate 2."""
    survival = propagate_m(1.0, [1.0], single_state).survival
    assert survival == pytest.approx(math.exp(-2.0), rel=1e-12)


def test_propagate_negative_time(onoff):
    """Test that negative times are rejected."""
    with pytest.raises(NegativeTime):
        propagate_m(-0.1, [0.5, 0.5], onoff)


def test_propagate_matches_ode(onoff):
    """Test the matrix exponential against a high-order ODE solve."""
    G = onoff.sub_generator
    solution = solve_ivp(
        lambda _, y: y @ G, (0.0, 1.0), [1.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14
    )
    assert np.allclose(propagate_m(1.0, [1.0, 0.0], onoff).m, solution.y[:, -1], atol=1e-8)


def test_survival_bounds(callcenter):
    """Test exp(-lam_max t) <= s <= exp(-lam_min t)."""
    rng = np.random.default_rng(3)
    for pi in rng.dirichlet(np.ones(3), size=20):
        t = float(rng.uniform(0.0, 2.0))
        s = propagate_m(t, pi, callcenter).survival
        assert math.exp(-4.0 * t) - 1e-12 <= s <= math.exp(-1.0 * t) + 1e-12


@pytest.mark.parametrize("name", ["onoff", "fed", "callcenter"])
def test_flow_semigroup(name):
    """Test x(t + u, pi) = x(u, x(t, pi))."""
    model = load_bundled(name)
    rng = np.random.default_rng(7)
    for pi in rng.dirichlet(np.ones(model.m), size=20):
        t, u = rng.uniform(0.0, 2.0, size=2)
        direct = flow_x(t + u, pi, model).pi
        chained = flow_x(u, flow_x(t, pi, model), model).pi
        assert np.max(np.abs(direct - chained)) < 1e-8


def test_flow_long_horizon_stays_normalized(callcenter):
    """Test that chaining keeps long flows on the simplex."""
    x = flow_x(500.0, [0.0, 0.0, 1.0], callcenter).pi
    assert x.sum() == pytest.approx(1.0, abs=1e-12)
    assert x.min() >= 0.0


def test_flow_fixed_point_onoff(onoff):
    """Test the flow limit against the root of 3 - p - 3p^2."""
    root = brentq(lambda p: 3.0 - p - 3.0 * p * p, 0.0, 1.0, xtol=1e-14)
    assert root == pytest.approx((-1.0 + math.sqrt(37.0)) / 6.0)
    assert flow_x(50.0, [0.5, 0.5], onoff)[0] == pytest.approx(root, abs=1e-6)
    assert flow_fixed_point(onoff)[0] == pytest.approx(root, abs=1e-10)


def test_flow_fixed_point_callcenter(callcenter):
    """Test the call-center flow limit."""
    fixed = flow_fixed_point(callcenter).pi
    assert np.allclose(np.round(fixed, 2), [0.7, 0.23, 0.07])
    assert np.allclose(flow_drift(fixed, callcenter), 0.0, atol=1e-12)


def test_drift_is_tangent(callcenter, single_state):
    """Test that the drift sums to zero and vanishes for one state."""
    rng = np.random.default_rng(11)
    for pi in rng.dirichlet(np.ones(3), size=10):
        assert abs(flow_drift(pi, callcenter).sum()) < 1e-12
    assert np.allclose(flow_drift([1.0], single_state), 0.0)


def test_drift_matches_finite_difference(callcenter):
    """Test the drift against a central difference of the flow."""
    pi = Belief(np.array([0.2, 0.5, 0.3]))
    t0, h = 0.1, 1e-5
    slope = (flow_x(t0 + h, pi, callcenter).pi - flow_x(t0 - h, pi, callcenter).pi) / (2 * h)
    assert np.allclose(slope, flow_drift(flow_x(t0, pi, callcenter), callcenter), atol=1e-6)


def test_jump_update_onoff(onoff):
    """Test the arrival update at the uniform belief."""
    assert np.allclose(jump_update([0.5, 0.5], 0, onoff).pi, [0.2, 0.8])


def test_jump_update_marks(callcenter):
    """Test the mark-dependent update of the call center."""
    post = jump_update(Belief.uniform(3), 2, callcenter).pi
    assert np.allclose(post, [1.0 / 13.0, 4.0 / 13.0, 8.0 / 13.0])


def test_jump_update_impossible_mark():
    """Test that a mark with zero likelihood raises."""
    model = validate(
        {
            "states": ["a", "b"],
            "Q": [[-1.0, 1.0], [1.0, -1.0]],
            "lambda": [1.0, 2.0],
            "marks": [1.0, 2.0],
            "nu": [[1.0, 0.0], [1.0, 0.0]],
            "policies": ["p", "q"],
            "c": [[1.0, 0.0], [0.0, 1.0]],
            "K": 0.1,
        }
    )
    with pytest.raises(ImpossibleMark):
        jump_update([0.5, 0.5], 1, model)


def test_jump_coefficient_sums_to_zero(callcenter):
    """Test that the jump keeps the belief on the simplex."""
    for j in range(3):
        assert abs(jump_coefficient([0.1, 0.6, 0.3], j, callcenter).sum()) < 1e-14


def test_flow_cache_trajectory(onoff):
    """Test the batched mesh flow against direct evaluation."""
    cache = FlowCache(onoff, 0.05)
    points = np.array([[1.0, 0.0], [0.25, 0.75]])
    x, s = cache.trajectory(points, 10)
    assert x.shape == (11, 2, 2)
    for k in (0, 4, 10):
        for p in range(2):
            assert np.allclose(x[k, p], flow_x(0.05 * k, points[p], onoff).pi, atol=1e-12)
            expected = propagate_m(0.05 * k, points[p], onoff).survival
            assert s[k, p] == pytest.approx(expected, rel=1e-10)


def test_filter_path_without_arrivals(onoff):
    """Test that the filter follows the flow when nothing arrives."""
    trajectory = filter_path([], [1.0, 0.0], 1.0, onoff, mesh=[0.0, 0.5, 1.0])
    assert np.allclose(trajectory.beliefs[1], flow_x(0.5, [1.0, 0.0], onoff).pi)
    assert np.allclose(trajectory.beliefs[2], flow_x(1.0, [1.0, 0.0], onoff).pi)


def test_filter_path_jump(onoff):
    """Test left limits and posteriors at an arrival."""
    trajectory = filter_path([(0.4, 0)], [0.5, 0.5], 1.0, onoff, mesh=[0.0, 0.4, 1.0])
    pre = flow_x(0.4, [0.5, 0.5], onoff)
    assert np.allclose(trajectory.left_limits[0], pre.pi)
    assert np.allclose(trajectory.posteriors[0], jump_update(pre, 0, onoff).pi)
    assert np.allclose(trajectory.beliefs[1], trajectory.posteriors[0])
    assert np.allclose(trajectory.beliefs[2], flow_x(0.6, trajectory.posteriors[0], onoff).pi)


def test_filter_path_rejects_unsorted(onoff):
    """Test that arrival times must increase."""
    with pytest.raises(UnsortedArrivals):
        filter_path([(0.5, 0), (0.2, 0)], [0.5, 0.5], 1.0, onoff)


def test_filter_path_relaxes_to_flow_limit(callcenter):
    """Test that the call-center filter forgets the arrivals after a long quiet spell."""
    arrivals = [(0.51, 1), (0.66, 2), (1.44, 0), (2.23, 1)]
    trajectory = filter_path(arrivals, [0.0, 1.0, 0.0], 30.0, callcenter, mesh=[0.0, 30.0])
    assert np.allclose(np.round(trajectory.beliefs[-1], 2), [0.7, 0.23, 0.07])
