from unittest.mock import patch

import pytest

from trackswitch.checks import check_config, run_checks
from trackswitch.errors import MaxIterations
from trackswitch.problem import load_bundled


@pytest.fixture(scope="module")
def onoff_results():
    return run_checks(load_bundled("onoff"), seed=0)


def test_every_suite_passes_on_onoff(onoff_results):
    """Test that the reduced-scale invariant suites all pass on the on/off model."""
    failed = [f"{r.name}: {r.detail}" for r in onoff_results if not r.passed]
    assert failed == []


def test_suite_names(onoff_results):
    """Test that every invariant is reported under its own name."""
    names = [r.name for r in onoff_results]
    assert names == [
        "semigroup",
        "normalization",
        "ode-oracle",
        "survival-bounds",
        "drift-tangent",
        "uniform-bound",
        "lipschitz-in-horizon",
        "convexity",
        "fixed-point-residual",
        "switch-consistency",
        "no-action-closed-form",
        "dominates-no-action",
        "monotone-switch-iterates",
        "tower-property",
    ]


def test_failing_suite_is_reported():
    """Test that a suite raising a solver error becomes a failed result."""
    onoff = load_bundled("onoff")
    with patch("trackswitch.checks.solve_finite", side_effect=MaxIterations("stuck")):
        results = run_checks(onoff, seed=0)
    (solver,) = [r for r in results if r.name == "solver"]
    assert not solver.passed
    assert solver.detail == "MaxIterations: stuck"


def test_check_config_by_dimension():
    """Test the reduced lattice used by the checks."""
    assert check_config(load_bundled("onoff")).grid == 40
    assert check_config(load_bundled("fed")).grid == 12
