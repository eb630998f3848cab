import numpy as np
import pytest
from numpy.polynomial import polynomial as P

from carleman_moments import (
    ResourceBudgetError,
    build_propagator,
    exact_moment,
    expected_block,
    initial_state,
    load_spec,
    propagate,
)
from carleman_moments.carleman import assemble, enumerate_H, estimate_assembly_bytes
from carleman_moments.kron import MomentLayout

from helpers import random_quadratic_spec
from test_model import TRUNC_MOMENTS


@pytest.fixture(scope="module")
def logistic():
    return load_spec("builtin:logistic")


def test_enumerate_H():
    assert enumerate_H(2, 3, 2) == ((1, 2), (2, 1))
    assert enumerate_H(0, 0, 2) == ((),)
    assert enumerate_H(2, 5, 2) == ()
    assert len(enumerate_H(3, 3, 2)) == 7


def test_logistic_scalar_blocks(logistic):
    def e(j, k):
        m = expected_block(logistic, j, k).matrix
        return float(m[0, 0]) if m.nnz else 0.0

    assert e(1, 1) == pytest.approx(0.5)
    assert e(1, 2) == pytest.approx(-0.5)
    assert e(2, 2) == pytest.approx(19 / 75)
    assert e(2, 3) == pytest.approx(-38 / 75)
    assert e(2, 4) == pytest.approx(19 / 75)
    assert e(2, 5) == 0.0


def test_logistic_truncated_matrix(logistic):
    p = build_propagator(logistic, 2)
    expected = [[1, 0, 0], [0, 0.5, -0.5], [0, 0, 19 / 75]]
    np.testing.assert_allclose(p.matrix.toarray(), expected, atol=1e-15)


def test_one_step_first_moment(logistic):
    st = propagate(build_propagator(logistic, 4), initial_state(logistic, 4), 1)
    assert st.moment(1)[0] == pytest.approx(0.5 * (TRUNC_MOMENTS[1] - TRUNC_MOMENTS[2]), rel=1e-12)


def _logistic_quadrature(fn):
    """E[fn(x(1), x(2))] by Gauss rules in r1, r2 and exact x0 moments."""
    z, w = np.polynomial.legendre.leggauss(8)
    r, w = 0.5 + 0.1 * z, w / 2
    total = 0.0
    for r1, w1 in zip(r, w):
        for r2, w2 in zip(r, w):
            x1 = np.array([0.0, r1, -r1])
            x2 = P.polysub(P.polymul([r2], x1), P.polymul([r2], P.polymul(x1, x1)))
            poly = fn(x1, x2)
            total += w1 * w2 * np.dot(poly, TRUNC_MOMENTS[: len(poly)])
    return total


def test_exact_moments_against_quadrature(logistic):
    mean2 = _logistic_quadrature(lambda x1, x2: x2)
    second1 = _logistic_quadrature(lambda x1, x2: P.polymul(x1, x1))
    assert exact_moment(logistic, 1, 2)[0] == pytest.approx(mean2, rel=1e-12)
    assert exact_moment(logistic, 2, 1)[0] == pytest.approx(second1, rel=1e-12)


@pytest.mark.parametrize("reduced", [False, True])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_assembly_matches_literal_blocks(seed, reduced):
    spec = random_quadratic_spec(np.random.default_rng(seed))
    N = 4
    E = assemble(spec, N, 2 * N, reduced)
    rows = MomentLayout(spec.n, N, reduced)
    cols = MomentLayout(spec.n, 2 * N, reduced)
    for j in range(N + 1):
        for k in range(2 * N + 1):
            literal = expected_block(spec, j, k, reduced).matrix.toarray()
            got = E[rows.block(j), cols.block(k)].toarray()
            np.testing.assert_allclose(got, literal, atol=1e-13)


def test_truncation_is_a_submatrix(logistic):
    big = build_propagator(logistic, 8).matrix.toarray()
    small = assemble(logistic, 3, 3).toarray()
    np.testing.assert_array_equal(small, big[:4, :4])


def test_gaussian_noise_system_modes_agree():
    spec = random_quadratic_spec(np.random.default_rng(5), noise_kind="gaussian")
    full = propagate(build_propagator(spec, 3, reduced=False), initial_state(spec, 3, reduced=False), 2)
    red = propagate(build_propagator(spec, 3, reduced=True), initial_state(spec, 3, reduced=True), 2)
    np.testing.assert_allclose(full.moment(1), red.moment(1), atol=1e-13)


def test_budget_refusal_happens_before_assembly(logistic):
    need = estimate_assembly_bytes(logistic, 64, 64, True)
    fresh = load_spec("builtin:logistic")
    with pytest.raises(ResourceBudgetError):
        build_propagator(fresh, 64, mem_budget=need - 1)
    assert not fresh._cache.get("assembled")


def test_propagate_checks_shapes(logistic):
    p = build_propagator(logistic, 4)
    with pytest.raises(ValueError):
        propagate(p, initial_state(logistic, 3), 1)
    with pytest.raises(ValueError):
        propagate(p, initial_state(logistic, 4), -1)
    with pytest.raises(ValueError):
        build_propagator(logistic, 0)


def test_trajectory_returns_every_step(logistic):
    p = build_propagator(logistic, 4)
    states = propagate(p, initial_state(logistic, 4), 3, trajectory=True)
    assert [s.t for s in states] == [0, 1, 2, 3]
    assert states[0].moment(0)[0] == 1.0 and states[-1].moment(0)[0] == pytest.approx(1.0)
