import numpy as np
import pytest

from trackswitch.beliefgrid import (
    NodeFunction,
    build_lattice,
    default_resolution,
    interpolate,
    interpolation_matrix,
    interpolation_weights,
    node_count,
)
from trackswitch.errors import GridError, ResolutionTooLarge


def test_node_count():
    """Test the number of compositions of N into m parts."""
    assert node_count(2, 4) == 5
    assert node_count(3, 2) == 6
    assert node_count(3, 50) == 1326
    assert build_lattice(3, 50).size == 1326


def test_default_resolution():
    """Test grid defaults by dimension."""
    assert default_resolution(2) == 200
    assert default_resolution(3) == 60
    assert default_resolution(4) == 30


def test_lattice_order():
    """Test that nodes are ordered lexicographically in their counts."""
    lattice = build_lattice(2, 4)
    assert lattice.counts.tolist() == [[0, 4], [1, 3], [2, 2], [3, 1], [4, 0]]
    assert np.allclose(lattice.points[1], [0.25, 0.75])


def test_lattice_cap():
    """Test that oversized lattices are refused."""
    with pytest.raises(ResolutionTooLarge):
        build_lattice(3, 50, node_cap=1000)


def test_lattice_rejects_bad_resolution():
    """Test that a zero resolution is a grid error."""
    with pytest.raises(GridError):
        build_lattice(2, 0)


@pytest.mark.parametrize(("m", "N"), [(2, 7), (3, 9), (4, 5)])
def test_index_of_inverts_enumeration(m, N):
    """Test that index_of recovers the position of every node."""
    lattice = build_lattice(m, N)
    assert np.array_equal(lattice.index_of(lattice.counts), np.arange(lattice.size))


def test_vertices_are_nodes():
    """Test that the simplex vertices are lattice nodes."""
    lattice = build_lattice(3, 6)
    for i in range(3):
        assert np.allclose(lattice.points[lattice.vertex(i)], np.eye(3)[i])


def test_nearest():
    """Test nearest-node rounding."""
    lattice = build_lattice(3, 4)
    node = lattice.nearest([0.49, 0.26, 0.25])
    assert lattice.counts[node].tolist() == [2, 1, 1]


@pytest.mark.parametrize(("m", "N"), [(2, 5), (3, 7), (4, 4)])
def test_weights_reconstruct_point(m, N):
    """Test that the cell weights are barycentric coordinates of the point."""
    lattice = build_lattice(m, N)
    points = np.random.default_rng(5).dirichlet(np.ones(m), size=200)
    nodes, weights = interpolation_weights(lattice, points)
    assert np.all(weights >= 0.0)
    assert np.allclose(weights.sum(axis=1), 1.0)
    rebuilt = np.einsum("nk,nkr->nr", weights, lattice.points[nodes])
    assert np.allclose(rebuilt, points, atol=1e-12)


def test_interpolation_exact_at_nodes():
    """Test that the interpolant reproduces nodal values."""
    lattice = build_lattice(3, 5)
    values = np.random.default_rng(2).normal(size=(lattice.size, 2))
    f = NodeFunction(lattice, values)
    assert np.allclose(f.at(lattice.points), values, atol=1e-12)


def test_interpolation_reproduces_linear_functions():
    """Test that linear functions of the belief are interpolated exactly."""
    lattice = build_lattice(3, 6)
    coefficients = np.array([1.5, -2.0, 0.25])
    f = NodeFunction(lattice, lattice.points @ coefficients)
    points = np.random.default_rng(9).dirichlet(np.ones(3), size=50)
    assert np.allclose(f.at(points, 0), points @ coefficients, atol=1e-12)


def test_interpolation_hand_example():
    """Test the midpoint of a segment on a two-state lattice."""
    lattice = build_lattice(2, 2)
    f = NodeFunction(lattice, np.array([0.0, 1.0, 0.0]))
    assert interpolate(f, [0.75, 0.25], 0) == pytest.approx(0.5)


def test_interpolation_is_monotone():
    """Test that raising a nodal value never lowers the interpolant."""
    lattice = build_lattice(3, 5)
    rng = np.random.default_rng(4)
    values = rng.normal(size=lattice.size)
    raised = values.copy()
    raised[7] += 1.0
    points = rng.dirichlet(np.ones(3), size=100)
    low = NodeFunction(lattice, values).at(points, 0)
    high = NodeFunction(lattice, raised).at(points, 0)
    assert np.all(high >= low - 1e-15)


def test_interpolation_overestimates_convex_functions():
    """Test that the interpolant of a convex function lies above it."""
    lattice = build_lattice(3, 8)
    f = NodeFunction(lattice, np.sum(lattice.points**2, axis=1))
    points = np.random.default_rng(6).dirichlet(np.ones(3), size=100)
    assert np.all(f.at(points, 0) >= np.sum(points**2, axis=1) - 1e-12)


def test_interpolation_matrix_matches_weights():
    """Test the sparse interpolation operator."""
    lattice = build_lattice(3, 4)
    values = np.arange(lattice.size, dtype=float)
    points = np.random.default_rng(8).dirichlet(np.ones(3), size=10)
    matrix = interpolation_matrix(lattice, points)
    assert matrix.shape == (10, lattice.size)
    assert np.allclose(matrix @ values, NodeFunction(lattice, values).at(points, 0))


def test_single_state_lattice():
    """Test the degenerate one-point lattice."""
    lattice = build_lattice(1, 3)
    assert lattice.size == 1
    assert interpolate(NodeFunction(lattice, np.array([[2.0, 3.0]])), [1.0], 1) == 3.0


def test_node_function_rejects_non_finite():
    """Test that NaN nodal values are refused."""
    lattice = build_lattice(2, 2)
    with pytest.raises(GridError):
        NodeFunction(lattice, np.array([0.0, np.nan, 1.0]))


def test_node_function_frame(tmp_path):
    """Test the long-format table of nodal values."""
    lattice = build_lattice(2, 2)
    f = NodeFunction(lattice, np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]))
    frame = f.to_frame(["on", "off"])
    assert list(frame.columns) == ["node", "pi_1", "pi_2", "policy", "value"]
    assert frame.shape[0] == 6
    assert frame.loc[frame["policy"] == "off", "value"].tolist() == [1.0, 3.0, 5.0]
    f.to_csv(tmp_path / "values.csv", ["on", "off"])
    assert (tmp_path / "values.csv").read_text().startswith("node,pi_1,pi_2,policy,value")
