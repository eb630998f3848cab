"""Expected Carleman blocks, truncated propagators and moment propagation.

The expected block ``E_{j,k}`` maps ``E[x^[k](t)]`` to its contribution in
``E[x^[j](t+1)]``.  Stacking the blocks for ``0 <= j <= N`` and ``0 <= k <= M``
gives ``E(N, M)``; the square ``E(N_T, N_T)`` is the truncated propagator.

Two assembly routes exist.  Full mode follows the Kronecker recursion
``A_{j+1,k} = sum_i F_i ⊗ A_{j,k-i}`` on matrices of noise polynomials and
takes expectations entrywise.  Reduced mode expands the monomial
``prod_l x_{r_l}(t+1)`` for each row monomial as a commutative polynomial in
state and noise variables, which merges duplicate Kronecker entries on the fly.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._polyarray import PolyArray
from .kron import MomentLayout, MonomialIndexer, exponent_array, finalize, reduction_map
from .model import NoisePolynomial, SystemSpec, stacked_initial_moments

DEFAULT_MEM_BUDGET = 1 << 30


class ResourceBudgetError(MemoryError):
    """Requested construction exceeds the configured resource budget."""


@functools.lru_cache(maxsize=None)
def enumerate_H(j: int, k: int, nu: int) -> tuple[tuple[int, ...], ...]:
    """All ``j``-tuples over ``{0..nu}`` summing to ``k``."""
    if j < 0:
        raise ValueError("j must be non-negative")
    if k < 0 or k > j * nu:
        return ()
    if j == 0:
        return ((),)
    return tuple((i,) + rest for i in range(nu + 1) for rest in enumerate_H(j - 1, k - i, nu))


# -- symbolic matrices of noise polynomials ---------------------------------


def _sym_kron(A: dict, B: dict, shape_b: tuple[int, int]) -> dict:
    rb, cb = shape_b
    return {
        (r1 * rb + r2, c1 * cb + c2): p * q
        for (r1, c1), p in A.items()
        for (r2, c2), q in B.items()
    }


def _sym_add(acc: dict, other: dict) -> None:
    for key, p in other.items():
        acc[key] = acc[key] + p if key in acc else p


def _sym_expectation(A: dict, shape, noise) -> sp.csr_matrix:
    if not A:
        return sp.csr_matrix(shape)
    keys = list(A)
    vals = [A[k].expectation(noise) for k in keys]
    rows = [k[0] for k in keys]
    cols = [k[1] for k in keys]
    return finalize(sp.csr_matrix((vals, (rows, cols)), shape=shape))


@dataclass(frozen=True)
class ExpectedBlock:
    j: int
    k: int
    matrix: sp.csr_matrix
    reduced: bool


def expected_block(spec: SystemSpec, j: int, k: int, reduced: bool | None = None) -> ExpectedBlock:
    """``E_{j,k}`` as the literal sum over ``H_{j,k}`` of expected Kronecker products.

    In reduced mode, columns are summed per monomial and rows are taken at
    one representative position per monomial.
    """
    reduced = spec.use_reduced(reduced)
    n, F = spec.n, spec.coefficients
    total: dict = {}
    for tup in enumerate_H(j, k, spec.degree):
        if any(not F[i] for i in tup):
            continue
        M = {(0, 0): NoisePolynomial.constant(1.0)}
        for i in tup:
            M = _sym_kron(M, F[i], (n, n**i))
        _sym_add(total, M)
    matrix = _sym_expectation(total, (n**j, n**k), spec.noise)
    if reduced:
        rows = reduction_map(n, j).representative
        matrix = finalize(matrix[rows, :] @ reduction_map(n, k).column_sum_matrix())
    return ExpectedBlock(j, k, matrix, reduced)


# -- assembly ----------------------------------------------------------------


def _full_row_terms(spec: SystemSpec) -> int:
    counts = [0] * spec.n
    for F in spec.coefficients:
        for r, _ in F:
            counts[r] += 1
    return max(counts)


def estimate_assembly_bytes(spec: SystemSpec, N: int, M: int, reduced: bool) -> int:
    """Upper estimate of the triplet storage needed for ``E(N, M)``."""
    terms = max(spec.max_row_terms() if reduced else _full_row_terms(spec), 1)
    rows = MomentLayout(spec.n, N, reduced)
    cols = MomentLayout(spec.n, M, reduced).size
    nnz = sum(rows.block_dim(j) * min(terms**j, cols) for j in range(N + 1))
    return 24 * nnz


def _check_budget(spec, N, M, reduced, mem_budget):
    need = estimate_assembly_bytes(spec, N, M, reduced)
    if need > mem_budget:
        mode = "reduced" if reduced else "full"
        raise ResourceBudgetError(
            f"E({N},{M}) in {mode} mode needs about {need / 2**20:.0f} MiB, "
            f"budget is {mem_budget / 2**20:.0f} MiB"
        )


def _assemble_full(spec: SystemSpec, N: int, M: int) -> sp.csr_matrix:
    n, nu, F = spec.n, spec.degree, spec.coefficients
    rows_layout = MomentLayout(n, N, reduced=False)
    cols_layout = MomentLayout(n, M, reduced=False)
    parts = [sp.coo_matrix(([1.0], ([0], [0])), shape=(1, 1))]
    offsets = [(0, 0)]
    level = {0: {(0, 0): NoisePolynomial.constant(1.0)}}
    for j in range(1, N + 1):
        nxt = {}
        for k in range(min(j * nu, M) + 1):
            acc: dict = {}
            for i in range(nu + 1):
                if F[i] and (k - i) in level:
                    _sym_add(acc, _sym_kron(F[i], level[k - i], (n ** (j - 1), n ** (k - i))))
            acc = {key: p for key, p in acc.items() if not p.is_zero}
            if acc:
                nxt[k] = acc
                parts.append(_sym_expectation(acc, (n**j, n**k), spec.noise).tocoo())
                offsets.append((rows_layout.offsets[j], cols_layout.offsets[k]))
        level = nxt
    rows = np.concatenate([b.row.astype(np.int64) + r0 for b, (r0, _) in zip(parts, offsets)])
    cols = np.concatenate([b.col.astype(np.int64) + c0 for b, (_, c0) in zip(parts, offsets)])
    vals = np.concatenate([b.data for b in parts])
    shape = (rows_layout.size, cols_layout.size)
    return finalize(sp.csr_matrix((vals, (rows, cols)), shape=shape))


def _row_polyarrays(spec: SystemSpec) -> list[PolyArray]:
    n, names = spec.n, spec.noise_symbols
    q = len(names)
    out = []
    for terms in spec.row_terms():
        exps, coefs = [], []
        for state_exp, poly in terms:
            for mono, c in poly.terms.items():
                noise_exp = [0] * q
                for name, e in mono:
                    noise_exp[names.index(name)] = e
                exps.append(list(state_exp) + noise_exp)
                coefs.append(c)
        out.append(PolyArray(np.array(exps, dtype=np.int64).reshape(-1, n + q), np.array(coefs)))
    return out


def _assemble_reduced(spec: SystemSpec, N: int, M: int) -> sp.csr_matrix:
    n = spec.n
    names = spec.noise_symbols
    q = len(names)
    row_polys = _row_polyarrays(spec)
    max_noise = [max((int(p.exps[:, n + s].max()) if len(p) else 0) for p in row_polys) for s in range(q)]
    tables = [spec.noise[name].moments(max(1, N * max_noise[s])) for s, name in enumerate(names)]
    rows_layout = MomentLayout(n, N, reduced=True)
    indexer = MonomialIndexer(n, M)

    trip_r, trip_c, trip_v = [np.zeros(1, dtype=np.int64)], [np.zeros(1, dtype=np.int64)], [np.ones(1)]
    prev = {(0,) * n: PolyArray.one(n + q)}
    for j in range(1, N + 1):
        cur = {}
        offset = rows_layout.offsets[j]
        for pos, alpha in enumerate(exponent_array(n, j)):
            alpha = tuple(int(a) for a in alpha)
            r = next(i for i, a in enumerate(alpha) if a)
            parent = alpha[:r] + (alpha[r] - 1,) + alpha[r + 1 :]
            P = prev[parent].multiply(row_polys[r], nstate=n, max_degree=M)
            cur[alpha] = P
            if not len(P):
                continue
            vals = P.coefs.copy()
            for s in range(q):
                vals *= tables[s][P.exps[:, n + s]]
            trip_r.append(np.full(vals.size, offset + pos, dtype=np.int64))
            trip_c.append(indexer.positions(P.exps[:, :n]))
            trip_v.append(vals)
        prev = cur
    shape = (rows_layout.size, indexer.layout.size)
    mat = sp.csr_matrix(
        (np.concatenate(trip_v), (np.concatenate(trip_r), np.concatenate(trip_c))), shape=shape
    )
    return finalize(mat)


def assemble(
    spec: SystemSpec, N: int, M: int, reduced: bool | None = None, mem_budget: int = DEFAULT_MEM_BUDGET
) -> sp.csr_matrix:
    """``E(N, M)``; cached per spec, and smaller requests are sliced from larger ones."""
    reduced = spec.use_reduced(reduced)
    cache = spec._cache.setdefault("assembled", {})
    rows = MomentLayout(spec.n, N, reduced).size
    cols = MomentLayout(spec.n, M, reduced).size
    for (n2, m2, red2), mat in cache.items():
        if red2 == reduced and n2 >= N and m2 >= M:
            return mat[:rows, :cols]
    _check_budget(spec, N, M, reduced, mem_budget)
    mat = _assemble_reduced(spec, N, M) if reduced else _assemble_full(spec, N, M)
    cache[(N, M, reduced)] = mat
    return mat


# -- truncated system --------------------------------------------------------


@dataclass(frozen=True)
class TruncatedPropagator:
    n: int
    nu: int
    N_T: int
    reduced: bool
    matrix: sp.csr_matrix
    spec_hash: str = ""

    @property
    def layout(self) -> MomentLayout:
        return MomentLayout(self.n, self.N_T, self.reduced)

    def block(self, j: int, k: int) -> sp.csr_matrix:
        lay = self.layout
        return self.matrix[lay.block(j), lay.block(k)]


@dataclass(frozen=True)
class MomentState:
    t: int
    y: np.ndarray
    layout: MomentLayout

    def moment(self, j: int) -> np.ndarray:
        return self.y[self.layout.block(j)]


def build_propagator(
    spec: SystemSpec, N_T: int, reduced: bool | None = None, mem_budget: int = DEFAULT_MEM_BUDGET
) -> TruncatedPropagator:
    if N_T < 1:
        raise ValueError("truncation limit must be at least 1")
    reduced = spec.use_reduced(reduced)
    matrix = assemble(spec, N_T, N_T, reduced, mem_budget)
    return TruncatedPropagator(spec.n, spec.degree, N_T, reduced, matrix, spec.content_hash())


def initial_state(spec: SystemSpec, N_T: int, reduced: bool | None = None) -> MomentState:
    reduced = spec.use_reduced(reduced)
    y = stacked_initial_moments(spec.initial, N_T, reduced)
    return MomentState(0, y, MomentLayout(spec.n, N_T, reduced))


def propagate(p: TruncatedPropagator, y0: MomentState, t: int, trajectory: bool = False):
    """``E(N_T, N_T)^t y0`` by ``t`` sparse mat-vecs.

    Returns the final state, or every state from ``y0`` onwards when
    ``trajectory`` is set.
    """
    if y0.y.shape[0] != p.matrix.shape[1]:
        raise ValueError(
            f"state of length {y0.y.shape[0]} does not match propagator {p.matrix.shape}"
        )
    if t < 0:
        raise ValueError("t must be non-negative")
    A = p.matrix
    y = y0.y
    states = [y0]
    for s in range(1, t + 1):
        y = A @ y
        if trajectory:
            states.append(MomentState(y0.t + s, y, y0.layout))
    if trajectory:
        return states
    return MomentState(y0.t + t, y, y0.layout)


# -- exact moments -----------------------------------------------------------


def exact_degrees(j0: int, nu: int, t: int) -> list[int]:
    return [j0 * nu**s for s in range(t + 1)]


def exact_moment_map(
    spec: SystemSpec, j0: int, t: int, reduced: bool | None = None, mem_budget: int = DEFAULT_MEM_BUDGET
) -> tuple[sp.csr_matrix, MomentLayout]:
    """Row block ``j0`` of ``E(j0, j0 nu) E(j0 nu, j0 nu^2) ... E(.., j0 nu^t)``.

    Applied to the stacked initial moments up to degree ``j0 nu^t``, it gives
    the exact ``E[x^[j0](t)]``.
    """
    reduced = spec.use_reduced(reduced)
    degs = exact_degrees(j0, spec.degree, t)
    width = MomentLayout(spec.n, degs[-1], reduced)
    first = MomentLayout(spec.n, j0, reduced)
    if t == 0:
        sel = sp.identity(width.size, format="csr")[first.block(j0), :]
        return sel, width
    big = assemble(spec, max(degs[:-1]), max(degs[1:]), reduced, mem_budget)

    def size(d):
        return MomentLayout(spec.n, d, reduced).size

    out = big[first.block(j0), : size(degs[1])]
    for s in range(1, t):
        out = out @ big[: size(degs[s]), : size(degs[s + 1])]
    return finalize(out), width


def exact_moment(
    spec: SystemSpec, j0: int, t: int, reduced: bool | None = None, mem_budget: int = DEFAULT_MEM_BUDGET
) -> np.ndarray:
    """Exact ``E[x^[j0](t)]`` through the growing non-square block chain."""
    reduced = spec.use_reduced(reduced)
    mapping, width = exact_moment_map(spec, j0, t, reduced, mem_budget)
    y = stacked_initial_moments(spec.initial, width.max_degree, reduced)
    return mapping @ y
