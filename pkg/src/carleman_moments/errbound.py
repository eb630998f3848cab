"""Truncation-error expansions and per-coordinate error certificates.

The error ``e(t) = E[x^[j0](t)] - x̃^(j0)(t)`` is linear in the stacked
initial moments ``ỹ = [E x_ini^[0]; ...; E x_ini^[D]]`` with ``D = j0 nu^t``:
``e(t) = ṽ ỹ``.  ``ṽ`` is the exact moment map minus row block ``j0`` of
``E(N_T, N_T)^t`` (zero-padded to width ``D``).  The bounds below only need
``ṽ`` and ``ỹ``; the exact certificate ``|ṽ ỹ|`` is the limit of both subset
bounds when the subset covers everything.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .carleman import (
    DEFAULT_MEM_BUDGET,
    ResourceBudgetError,
    TruncatedPropagator,
    exact_moment_map,
)
from .kron import MomentLayout, finalize
from .model import SystemSpec, stacked_initial_moments

DEFAULT_WIDTH_BUDGET = 10**7

STRATEGIES = ("largest-initial-moment", "largest-row-norm", "largest-stacked-coordinate")


@dataclass(frozen=True)
class ErrorExpansion:
    """``ṽ = [Ẽ_0 ... Ẽ_D]`` for moment degree ``j0`` at step ``t``."""

    j0: int
    t: int
    N_T: int
    vtilde: sp.csr_matrix
    layout: MomentLayout

    @property
    def max_degree(self) -> int:
        return self.layout.max_degree

    @property
    def reduced(self) -> bool:
        return self.layout.reduced

    @property
    def Etilde(self) -> list[sp.csr_matrix]:
        return [self.vtilde[:, self.layout.block(j)] for j in range(self.max_degree + 1)]

    def block_row_norms(self) -> np.ndarray:
        """``out[i, j]`` = absolute row sum of row ``i`` of ``Ẽ_j``."""
        lay = self.layout
        degree = np.repeat(np.arange(lay.max_degree + 1), lay.dims)
        ind = sp.csr_matrix(
            (np.ones(lay.size), (np.arange(lay.size), degree)), shape=(lay.size, lay.max_degree + 1)
        )
        return np.asarray((abs(self.vtilde) @ ind).todense())


def _truncated_row_map(p: TruncatedPropagator, j0: int, t: int) -> sp.csr_matrix:
    lay = p.layout
    if t == 0:
        return sp.identity(lay.size, format="csr")[lay.block(j0), :]
    out = p.matrix[lay.block(j0), :]
    for _ in range(t - 1):
        out = out @ p.matrix
    return finalize(out)


def error_expansion(
    spec: SystemSpec,
    propagator: TruncatedPropagator,
    j0: int,
    t: int,
    width_budget: int = DEFAULT_WIDTH_BUDGET,
    mem_budget: int = DEFAULT_MEM_BUDGET,
) -> ErrorExpansion:
    if not 0 <= j0 <= propagator.N_T:
        raise ValueError(f"j0={j0} outside 0..{propagator.N_T}")
    if t < 0:
        raise ValueError("t must be non-negative")
    reduced = propagator.reduced
    D = j0 * spec.degree**t
    width = MomentLayout(spec.n, D, reduced)
    if width.size > width_budget:
        raise ResourceBudgetError(
            f"error expansion for j0={j0}, t={t} needs {width.size} stacked coordinates, "
            f"budget is {width_budget}"
        )
    exact, _ = exact_moment_map(spec, j0, t, reduced, mem_budget)
    trunc = _truncated_row_map(propagator, j0, t)
    if trunc.shape[1] > width.size:
        tail = trunc[:, width.size :]
        if tail.nnz and abs(tail).max() > 0:
            raise AssertionError("truncated map reaches beyond the exact degree")
        trunc = trunc[:, : width.size]
    elif trunc.shape[1] < width.size:
        trunc = sp.hstack([trunc, sp.csr_matrix((trunc.shape[0], width.size - trunc.shape[1]))])
    return ErrorExpansion(j0, t, propagator.N_T, finalize(exact - trunc), width)


def stacked_initial(spec: SystemSpec, exp: ErrorExpansion) -> np.ndarray:
    """``ỹ`` matching the columns of ``exp.vtilde``; its first entry is 1."""
    return stacked_initial_moments(spec.initial, exp.max_degree, exp.reduced)


@dataclass(frozen=True)
class ErrorCertificate:
    j0: int
    t: int
    bounds: np.ndarray
    method: str
    subset: tuple | None = None

    @property
    def subset_size(self) -> int:
        return 0 if self.subset is None else len(self.subset)

    @property
    def sup(self) -> float:
        return float(self.bounds.max()) if self.bounds.size else 0.0


def _check_y(exp, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (exp.layout.size,):
        raise ValueError(f"stacked initial moments have shape {y.shape}, need ({exp.layout.size},)")
    return y


def exact_error(exp: ErrorExpansion, y) -> np.ndarray:
    return exp.vtilde @ _check_y(exp, y)


def exact_certificate(exp: ErrorExpansion, y) -> ErrorCertificate:
    return ErrorCertificate(exp.j0, exp.t, np.abs(exact_error(exp, y)), "exact")


def _block_sup(exp, y) -> np.ndarray:
    lay = exp.layout
    return np.array([np.abs(y[lay.block(j)]).max() for j in range(lay.max_degree + 1)])


def global_bound(exp: ErrorExpansion, y) -> ErrorCertificate:
    """``xi * sum_j ||v_{j,i}||`` with ``xi = max_j ||E x_ini^[j]||_inf``."""
    y = _check_y(exp, y)
    xi = np.abs(y).max()
    bounds = xi * np.asarray(abs(exp.vtilde).sum(axis=1)).ravel()
    return ErrorCertificate(exp.j0, exp.t, bounds, "global")


def bound_subset_J(exp: ErrorExpansion, y, J) -> ErrorCertificate:
    """Exact contribution of the degrees in ``J``, worst case over the rest."""
    y = _check_y(exp, y)
    D = exp.max_degree
    J = tuple(sorted({int(j) for j in J}))
    if J and (J[0] < 0 or J[-1] > D):
        raise ValueError(f"J must lie in 0..{D}")
    inside = np.zeros(D + 1, dtype=bool)
    inside[list(J)] = True
    mask = np.repeat(inside, exp.layout.dims)
    exact_part = exp.vtilde @ np.where(mask, y, 0.0)
    rest = ~inside
    if rest.any():
        xi = _block_sup(exp, y)[rest].max()
        tail = xi * exp.block_row_norms()[:, rest].sum(axis=1)
    else:
        tail = 0.0
    return ErrorCertificate(exp.j0, exp.t, np.abs(exact_part) + tail, "J", J)


def bound_subset_K(exp: ErrorExpansion, y, K) -> ErrorCertificate:
    """Exact contribution of stacked coordinates in ``K``, worst case over the rest."""
    y = _check_y(exp, y)
    K = tuple(sorted({int(k) for k in K}))
    if K and (K[0] < 0 or K[-1] >= y.size):
        raise ValueError(f"K must lie in 0..{y.size - 1}")
    mask = np.zeros(y.size, dtype=bool)
    mask[list(K)] = True
    exact_part = exp.vtilde @ np.where(mask, y, 0.0)
    if (~mask).any():
        ymax = np.abs(y[~mask]).max()
        tail = ymax * (abs(exp.vtilde) @ (~mask).astype(float))
    else:
        tail = 0.0
    return ErrorCertificate(exp.j0, exp.t, np.abs(exact_part) + tail, "K", K)


def certify(exp: ErrorExpansion, y, method: str, subset=None) -> ErrorCertificate:
    if method == "global":
        return global_bound(exp, y)
    if method == "J":
        return bound_subset_J(exp, y, subset or ())
    if method == "K":
        return bound_subset_K(exp, y, subset or ())
    if method == "exact":
        return exact_certificate(exp, y)
    raise ValueError(f"unknown bound method {method!r}")


def _top(scores: np.ndarray, size: int) -> tuple[int, ...]:
    # stable sort on -score keeps smaller indices first among ties
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:size]))


def select_subset(strategy: str, size: int, exp: ErrorExpansion, y, coordinate: int | None = None):
    """Indices for the subset bounds.

    The first two strategies return degrees ``j`` (for ``bound_subset_J``),
    the last returns stacked coordinates ``k`` (for ``bound_subset_K``).
    ``largest-row-norm`` ranks by ``||v_{j,i}||`` for one ``coordinate``, or
    by the largest over all coordinates when none is given.
    """
    y = _check_y(exp, y)
    if size < 0:
        raise ValueError("subset size must be non-negative")
    if strategy == "largest-initial-moment":
        scores = _block_sup(exp, y)
    elif strategy == "largest-row-norm":
        norms = exp.block_row_norms()
        scores = norms.max(axis=0) if coordinate is None else norms[coordinate]
    elif strategy == "largest-stacked-coordinate":
        scores = np.abs(y)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if size > scores.size:
        raise ValueError(f"subset size {size} exceeds the {scores.size} available indices")
    return _top(scores, size)


def write_certificates_csv(path, certificates, coordinates=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["j0", "t", "method", "subset_size", "coordinate", "bound"])
        for cert in certificates:
            for i, b in enumerate(cert.bounds):
                name = coordinates[i] if coordinates is not None else i
                w.writerow([cert.j0, cert.t, cert.method, cert.subset_size, name, repr(float(b))])
