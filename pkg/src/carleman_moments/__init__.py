"""Moment propagation for stochastic polynomial systems via truncated Carleman linearization."""

from .carleman import (
    ResourceBudgetError,
    TruncatedPropagator,
    MomentState,
    build_propagator,
    exact_moment,
    expected_block,
    initial_state,
    propagate,
)
from .model import NoiseDistribution, NoisePolynomial, SpecError, SystemSpec
from .specfile import load_spec, spec_from_dict

__version__ = "0.1.0"
