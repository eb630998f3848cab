import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carleman_moments import load_spec, spec_from_dict
from carleman_moments.kron import exponent_array
from carleman_moments.model import (
    ExplicitInitialState,
    FunctionalInitialState,
    IndependentInitialState,
    NoiseDistribution,
    NoisePolynomial,
    SpecError,
    initial_moments,
    poly_expectation,
)
from carleman_moments.oracle import make_rng

# moments of N(0.5, 0.1) truncated to [0, 1], adaptive quadrature at 30 digits
TRUNC_MOMENTS = [1.0, 0.5, 0.259999851327963293, 0.139999776991944940, 0.077799735363774662]


def test_uniform_moments_match_rational_values():
    d = NoiseDistribution.uniform(0.4, 0.6)
    assert d.moment(1) == pytest.approx(0.5, rel=1e-15)
    assert d.moment(2) == pytest.approx(19 / 75, rel=1e-15)
    assert d.moment(3) == pytest.approx(0.13, rel=1e-15)


@given(st.floats(-2, 2), st.floats(0.05, 2), st.integers(0, 8))
def test_gaussian_moments_match_hermite_quadrature(mu, sigma, k):
    z, w = np.polynomial.hermite_e.hermegauss(20)
    expected = (w * (mu + sigma * z) ** k).sum() / math.sqrt(2 * math.pi)
    got = NoiseDistribution.gaussian(mu, sigma).moment(k)
    assert got == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_truncated_gaussian_moments():
    d = NoiseDistribution.truncated_gaussian(0.5, 0.1, 0.0, 1.0)
    np.testing.assert_allclose(d.moments(4)[:5], TRUNC_MOMENTS, rtol=1e-12)


def test_truncated_sampler_stays_in_bounds():
    d = NoiseDistribution.truncated_gaussian(0.0, 1.0, -0.5, 2.0)
    x = d.sample(make_rng(3), 20_000)
    assert x.min() >= -0.5 and x.max() <= 2.0
    assert x.mean() == pytest.approx(d.moment(1), abs=0.02)


@pytest.mark.parametrize(
    "kind, params",
    [("uniform", (1.0, 1.0)), ("gaussian", (0.0, 0.0)), ("truncated_gaussian", (0, 1, 2, 1)), ("beta", (1, 2))],
)
def test_invalid_distributions_rejected(kind, params):
    with pytest.raises(SpecError):
        NoiseDistribution(kind, params)


def test_explicit_moments_have_a_horizon():
    d = NoiseDistribution.explicit([1.0, 0.0, 2.0])
    assert d.moment(2) == 2.0
    with pytest.raises(ValueError):
        d.moment(3)


def test_shared_noise_symbol_is_not_split():
    r = NoisePolynomial.symbol("r")
    dists = {"r": NoiseDistribution.uniform(0.4, 0.6)}
    assert poly_expectation(r * -r, dists) == pytest.approx(-19 / 75, rel=1e-14)
    # treating the two factors as independent would give -0.25
    assert poly_expectation(r, dists) * poly_expectation(-r, dists) == pytest.approx(-0.25)


def test_polynomial_arithmetic():
    w = NoisePolynomial.symbol("w")
    p = (w + 1) * (w - 1)
    assert p == w * w - 1
    assert (p - p).is_zero
    with pytest.raises(SpecError):
        poly_expectation(w, {})


def test_independent_initial_moments_factor():
    model = IndependentInitialState(
        [NoiseDistribution.gaussian(1.0, 0.1), NoiseDistribution.gaussian(0.8, 0.1)]
    )
    blocks = initial_moments(model, 2, reduced=True)
    np.testing.assert_allclose(blocks[1], [1.0, 0.8])
    np.testing.assert_allclose(blocks[2], [1.01, 0.8, 0.65])
    full = initial_moments(model, 2, reduced=False)[2]
    np.testing.assert_allclose(full, [1.01, 0.8, 0.8, 0.65])


def test_functional_initial_state_trigonometric_moments():
    beta, sigma = math.pi / 8, 0.1
    model = FunctionalInitialState(
        {"psi": NoiseDistribution.gaussian(0.0, sigma)},
        [f"cos(psi + {beta!r})", f"sin(psi + {beta!r})"],
    )
    exps = np.array([[1, 0], [0, 1], [2, 0], [1, 1]])
    got = model.monomial_moments(exps)
    damp = math.exp(-sigma**2 / 2)
    expected = [
        math.cos(beta) * damp,
        math.sin(beta) * damp,
        (1 + math.cos(2 * beta) * damp**4) / 2,
        math.sin(2 * beta) * damp**4 / 2,
    ]
    np.testing.assert_allclose(got, expected, rtol=1e-10)


def test_functional_initial_state_independent_groups():
    model = FunctionalInitialState(
        {"a": NoiseDistribution.gaussian(1.0, 0.5), "b": NoiseDistribution.uniform(0.0, 1.0)},
        ["a", "a**2", "b"],
    )
    got = model.monomial_moments(np.array([[1, 1, 1], [0, 0, 2]]))
    # E[a^3] E[b] and E[b^2]
    np.testing.assert_allclose(got, [(1 + 3 * 0.25) * 0.5, 1 / 3], rtol=1e-10)


def test_functional_map_with_unknown_symbol_rejected():
    with pytest.raises(SpecError):
        FunctionalInitialState({"a": NoiseDistribution.gaussian(0, 1)}, ["a + z"])


def test_explicit_initial_state_accepts_full_blocks():
    model = ExplicitInitialState(2, [[1.0], [0.5, 0.2], [0.3, 0.1, 0.1, 0.05]])
    np.testing.assert_allclose(initial_moments(model, 2, reduced=True)[2], [0.3, 0.1, 0.05])
    with pytest.raises(ValueError):
        initial_moments(model, 3, reduced=True)


LOGISTIC = {
    "state": ["x"],
    "degree": 2,
    "noise": {"r": {"distribution": "uniform", "low": 0.4, "high": 0.6}},
    "initial": {
        "kind": "independent",
        "marginals": {
            "x": {"distribution": "truncated_gaussian", "mean": 0.5, "std": 0.1, "low": 0, "high": 1}
        },
    },
}


def test_dynamics_and_coefficients_describe_the_same_system():
    a = spec_from_dict({**LOGISTIC, "dynamics": {"x": "r*x - r*x**2"}})
    b = load_spec("builtin:logistic")
    assert a.content_hash() == b.content_hash()


def test_constants_are_substituted():
    a = spec_from_dict({**LOGISTIC, "constants": {"k": 2, "h": "k/4"}, "dynamics": {"x": "h*x - h*x**2"}})
    assert a.coefficients[1][(0, 0)].expectation(a.noise) == pytest.approx(0.5)


@pytest.mark.parametrize(
    "patch",
    [
        {"dynamics": {"x": "r*x**3"}},
        {"dynamics": {"x": "sin(x)"}},
        {"dynamics": {"x": "q*x"}},
        {"dynamics": {"y": "x"}},
        {"dynamics": {"x": "x"}, "coefficients": []},
        {"dynamics": {"x": "x"}, "correlation": 0.5},
        {"dynamics": {"x": "x"}, "initial": {"kind": "independent", "marginals": {}}},
        {"dynamics": {"x": "x"}, "noise": {"r": {"distribution": "uniform", "low": 1, "high": 0}}},
    ],
)
def test_bad_declarations_rejected(patch):
    with pytest.raises(SpecError):
        spec_from_dict({**LOGISTIC, **patch})


def test_joint_initial_distribution_rejected():
    decl = {**LOGISTIC, "dynamics": {"x": "x"}}
    decl["initial"] = {**LOGISTIC["initial"], "covariance": [[1.0]]}
    with pytest.raises(SpecError):
        spec_from_dict(decl)


def test_vehicle_builtin_loads():
    spec = load_spec("builtin:vehicle")
    assert spec.n == 6 and spec.degree == 3
    assert spec.interest == (0, 1)
    c = spec.initial.monomial_moments(np.array([[0, 0, 0, 0, 1, 0]]))[0]
    assert c == pytest.approx(math.cos(math.pi / 8) * math.exp(-0.005), rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reduced_coefficients_sum_full_columns(seed):
    from helpers import random_quadratic_spec

    spec = random_quadratic_spec(np.random.default_rng(seed))
    x = np.array([0.7, -1.3])
    w = {"w": 0.8}
    for i, F in enumerate(spec.coefficients):
        full = np.zeros(2)
        for (r, c), p in F.items():
            digits = [(c // 2 ** (i - 1 - k)) % 2 for k in range(i)]
            full[r] += _eval(p, w) * np.prod([x[d] for d in digits])
        red = np.zeros(2)
        exps = exponent_array(2, i)
        for (r, c), p in spec.reduced_coefficients(i).items():
            red[r] += _eval(p, w) * np.prod(x ** exps[c])
        np.testing.assert_allclose(red, full, atol=1e-12)


def _eval(p, w):
    return sum(c * math.prod(w[n] ** e for n, e in mono) for mono, c in p.terms.items())


def test_truncated_gaussian_moments_follow_the_closed_form_recursion():
    from scipy.special import ndtr

    mu, sigma, lo, hi = 0.3, 0.4, -0.2, 1.1
    a, b = (lo - mu) / sigma, (hi - mu) / sigma

    def phi(z):
        return math.exp(-z * z / 2) / math.sqrt(2 * math.pi)

    Z = ndtr(b) - ndtr(a)
    m = [1.0]
    for k in range(1, 9):
        prev2 = m[k - 2] if k >= 2 else 0.0
        edge = hi ** (k - 1) * phi(b) - lo ** (k - 1) * phi(a)
        m.append(mu * m[k - 1] + (k - 1) * sigma**2 * prev2 - sigma * edge / Z)
    got = NoiseDistribution.truncated_gaussian(mu, sigma, lo, hi).moments(8)[:9]
    np.testing.assert_allclose(got, m, rtol=1e-11, atol=1e-14)
