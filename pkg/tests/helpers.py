import numpy as np

from carleman_moments.model import IndependentInitialState, NoiseDistribution, NoisePolynomial, SystemSpec


def random_quadratic_spec(rng, n=2, noise_kind="uniform"):
    """Random ``n``-dimensional quadratic system with one shared noise symbol.

    Entries are ``c0 + c1 * w`` with small coefficients so moments stay tame.
    """
    w = NoiseDistribution.uniform(0.5, 1.0) if noise_kind == "uniform" else NoiseDistribution.gaussian(0.0, 0.3)
    coeffs = []
    for i in range(3):
        F = {}
        for r in range(n):
            for c in range(n**i):
                if rng.random() < 0.6:
                    a, b = rng.normal(scale=0.3, size=2)
                    F[(r, c)] = NoisePolynomial.constant(a) + NoisePolynomial.symbol("w") * b
        coeffs.append(F)
    init = IndependentInitialState(
        [NoiseDistribution.gaussian(rng.normal(scale=0.5), 0.1) for _ in range(n)]
    )
    return SystemSpec(n=n, degree=2, coefficients=tuple(coeffs), noise={"w": w}, initial=init)
