import csv

import numpy as np
import pytest

from carleman_moments import load_spec, spec_from_dict
from carleman_moments.oracle import (
    direct_error_expansion_small,
    empirical_coverage,
    empirical_moment,
    grid_maxdet_check,
    simulate,
    write_trajectories_csv,
)
from carleman_moments.safety import SafetyEllipsoid

EXPLICIT_INITIAL = {
    "state": ["x"],
    "degree": 2,
    "dynamics": {"x": "0.5*x - 0.5*x**2"},
    "initial": {"kind": "explicit", "moments": [[1.0], [0.5], [0.25], [0.125], [0.0625]]},
}


@pytest.fixture(scope="module")
def logistic():
    return load_spec("builtin:logistic")


def test_same_seed_same_trajectories(logistic):
    a = simulate(logistic, 500, 3, seed=7, batch_size=128)
    b = simulate(logistic, 500, 3, seed=7, batch_size=128)
    c = simulate(logistic, 500, 3, seed=8, batch_size=128)
    np.testing.assert_array_equal(a.trajectories, b.trajectories)
    assert not np.array_equal(a.trajectories, c.trajectories)
    # the first batch does not depend on how many samples follow it
    d = simulate(logistic, 128, 3, seed=7)
    np.testing.assert_array_equal(a.trajectories[:128], d.trajectories)


def test_deterministic_step_matches_hand_value():
    # planar step from (1, 0.8) with a fixed at 0.35: x1' = a x1 x2, x2' = a (x1 + x2)
    run_spec = spec_from_dict(
        {
            "state": ["x1", "x2"],
            "degree": 2,
            "dynamics": {"x1": "0.35*x1*x2", "x2": "0.35*(x1 + x2)"},
            "initial": {
                "kind": "functional",
                "base": {"u": {"distribution": "uniform", "low": 0, "high": 1}},
                "maps": {"x1": "1 + 0*u", "x2": "0.8 + 0*u"},
            },
        }
    )
    x = simulate(run_spec, 4, 1, seed=0).states(1)
    np.testing.assert_allclose(x, [[0.35 * 0.8, 0.35 * 1.8]] * 4)


def test_logistic_midpoint_step():
    spec = spec_from_dict(
        {
            "state": ["x"],
            "degree": 2,
            "dynamics": {"x": "0.5*x - 0.5*x**2"},
            "initial": {
                "kind": "functional",
                "base": {"u": {"distribution": "uniform", "low": 0, "high": 1}},
                "maps": {"x": "0.5 + 0*u"},
            },
        }
    )
    mean, se = empirical_moment(simulate(spec, 10, 1), 1, 1)
    assert mean[0] == pytest.approx(0.125) and se[0] == pytest.approx(0.0)


def test_explicit_initial_state_has_no_sampler():
    with pytest.raises(NotImplementedError):
        simulate(spec_from_dict(EXPLICIT_INITIAL), 10, 1)


def test_empirical_moment_shapes(logistic):
    run = simulate(logistic, 100, 1)
    assert empirical_moment(run, 0, 0)[0].tolist() == [1.0]
    planar = simulate(load_spec("builtin:planar"), 100, 1)
    assert empirical_moment(planar, 2, 1, reduced=True)[0].shape == (3,)
    assert empirical_moment(planar, 2, 1, reduced=False)[0].shape == (4,)
    with pytest.raises(ValueError):
        run.states(2)


def test_coverage_of_a_huge_region_is_one():
    run = simulate(load_spec("builtin:planar"), 200, 2)
    region = SafetyEllipsoid(np.eye(2), np.zeros(2), 1e6, 0.1, 1.0, 0.0)
    assert empirical_coverage(run, region, 2) == 1.0


def test_grid_search_recovers_identity_optimum():
    res = grid_maxdet_check(np.eye(2), 0.2, alpha=np.sqrt(10), points=10**4, rounds=4)
    assert res.feasible
    assert np.exp(res.logdet) == pytest.approx(1.0, rel=0.02)
    assert res.evaluated >= 4 * 10**4 * 0.9


def test_grid_search_reports_infeasible_box():
    # the smallest gridded diagonal already exceeds the budget
    res = grid_maxdet_check(np.eye(2), 0.1, points=1000, qmax=1e6)
    assert not res.feasible and res.Q is None and res.logdet == -np.inf
    with pytest.raises(ValueError):
        grid_maxdet_check(np.eye(3), 0.1)


def test_direct_expansion_zero_cases(logistic):
    assert direct_error_expansion_small(logistic, 8, 1, 2)[0] == 0.0
    assert direct_error_expansion_small(logistic, 8, 2, 1)[0] == 0.0
    assert direct_error_expansion_small(logistic, 3, 1, 2)[0] != 0.0
    with pytest.raises(ValueError):
        direct_error_expansion_small(load_spec("builtin:planar"), 4, 1, 1)


def test_trajectory_csv(tmp_path, logistic):
    run = simulate(logistic, 3, 2)
    path = tmp_path / "traj.csv"
    write_trajectories_csv(path, run, ["x"])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["sample", "t", "x"] and len(rows) == 1 + 3 * 3
