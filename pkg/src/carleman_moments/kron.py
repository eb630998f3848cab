"""Kronecker-power index algebra.

Full Kronecker powers index their entries by tuples of coordinates
``(i_1, ..., i_m)`` in mixed-radix order.  Reduced powers keep a single
entry per monomial, indexed by exponent tuples of total degree ``m`` in
descending lexicographic order, so that ``(m, 0, ..., 0)`` comes first.

Sparse matrices are plain :mod:`scipy.sparse` CSR matrices.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.sparse as sp


@functools.total_ordering
@dataclass(frozen=True)
class MultiIndex:
    exponents: tuple[int, ...]

    def __post_init__(self):
        if any(e < 0 for e in self.exponents):
            raise ValueError(f"negative exponent in {self.exponents}")

    @property
    def degree(self) -> int:
        return sum(self.exponents)

    def __lt__(self, other: "MultiIndex") -> bool:
        return self.exponents < other.exponents

    def __iter__(self):
        return iter(self.exponents)

    def __len__(self):
        return len(self.exponents)


@dataclass(frozen=True)
class IndexSet:
    n: int
    m: int
    members: tuple[MultiIndex, ...]

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def position(self, exponents) -> int:
        return _position_table(self.n, self.m)[tuple(exponents)]

    def as_array(self) -> np.ndarray:
        return exponent_array(self.n, self.m)


def _compositions_desc(n: int, m: int):
    if n == 1:
        yield (m,)
        return
    for first in range(m, -1, -1):
        for rest in _compositions_desc(n - 1, m - first):
            yield (first,) + rest


@functools.lru_cache(maxsize=None)
def _exponent_tuples(n: int, m: int) -> tuple[tuple[int, ...], ...]:
    return tuple(_compositions_desc(n, m))


@functools.lru_cache(maxsize=None)
def _position_table(n: int, m: int) -> dict[tuple[int, ...], int]:
    return {e: i for i, e in enumerate(_exponent_tuples(n, m))}


@functools.lru_cache(maxsize=None)
def exponent_array(n: int, m: int) -> np.ndarray:
    """Members of ``index_set(n, m)`` as an ``(count, n)`` integer array."""
    arr = np.array(_exponent_tuples(n, m), dtype=np.int64).reshape(-1, n)
    arr.setflags(write=False)
    return arr


def index_set(n: int, m: int) -> IndexSet:
    if n < 1 or m < 0:
        raise ValueError(f"index_set requires n >= 1 and m >= 0, got n={n}, m={m}")
    return IndexSet(n, m, tuple(MultiIndex(e) for e in _exponent_tuples(n, m)))


def reduced_dim(n: int, m: int) -> int:
    return comb(n + m - 1, m)


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("Kronecker powers of an empty vector are undefined")
    return v


def kron_power(v, m: int) -> np.ndarray:
    """``v ⊗ v ⊗ ... ⊗ v`` (``m`` factors); the zeroth power is ``[1]``."""
    if m < 0:
        raise ValueError("power must be non-negative")
    v = _as_vector(v)
    out = np.ones(1)
    for _ in range(m):
        out = np.kron(out, v)
    return out


def reduced_kron_power(v, m: int) -> np.ndarray:
    if m < 0:
        raise ValueError("power must be non-negative")
    v = _as_vector(v)
    exps = exponent_array(v.size, m)
    return np.prod(v[None, :] ** exps, axis=1)


@dataclass(frozen=True)
class ReductionMap:
    """Map from full Kronecker positions onto reduced (monomial) positions.

    ``target[p]`` is the reduced index of full position ``p``;
    ``representative[r]`` is the first full position mapping to ``r``.
    """

    n: int
    m: int
    target: np.ndarray
    multiplicity: np.ndarray
    representative: np.ndarray

    def expand(self, reduced) -> np.ndarray:
        return np.asarray(reduced)[..., self.target]

    def compress(self, full) -> np.ndarray:
        return np.asarray(full)[..., self.representative]

    def column_sum_matrix(self) -> sp.csr_matrix:
        """``S`` with ``F @ S`` summing the columns of ``F`` per monomial."""
        size = self.target.size
        return sp.csr_matrix(
            (np.ones(size), (np.arange(size), self.target)),
            shape=(size, self.multiplicity.size),
        )


@functools.lru_cache(maxsize=None)
def reduction_map(n: int, m: int) -> ReductionMap:
    if n < 1 or m < 0:
        raise ValueError(f"reduction_map requires n >= 1 and m >= 0, got n={n}, m={m}")
    table = _position_table(n, m)
    target = np.empty(n**m, dtype=np.int64)
    for p, digits in enumerate(itertools.product(range(n), repeat=m)):
        exps = [0] * n
        for d in digits:
            exps[d] += 1
        target[p] = table[tuple(exps)]
    size = len(table)
    multiplicity = np.bincount(target, minlength=size)
    _, representative = np.unique(target, return_index=True)
    for arr in (target, multiplicity, representative):
        arr.setflags(write=False)
    return ReductionMap(n, m, target, multiplicity, representative)


class MomentLayout:
    """Offsets of the degree blocks in a stacked vector ``[x^[0]; ...; x^[D]]``."""

    def __init__(self, n: int, max_degree: int, reduced: bool):
        if n < 1 or max_degree < 0:
            raise ValueError("invalid layout")
        self.n = n
        self.max_degree = max_degree
        self.reduced = bool(reduced)
        dims = [self.block_dim(j) for j in range(max_degree + 1)]
        self.dims = tuple(dims)
        self.offsets = tuple(np.concatenate([[0], np.cumsum(dims)]).tolist())
        self.size = self.offsets[-1]

    def block_dim(self, j: int) -> int:
        return reduced_dim(self.n, j) if self.reduced else self.n**j

    def block(self, j: int) -> slice:
        return slice(self.offsets[j], self.offsets[j + 1])

    def degree_of(self, position: int) -> int:
        return int(np.searchsorted(self.offsets, position, side="right") - 1)

    def __eq__(self, other):
        return (
            isinstance(other, MomentLayout)
            and (self.n, self.max_degree, self.reduced)
            == (other.n, other.max_degree, other.reduced)
        )

    def __repr__(self):
        mode = "reduced" if self.reduced else "full"
        return f"MomentLayout(n={self.n}, max_degree={self.max_degree}, {mode})"


class MonomialIndexer:
    """Vectorised lookup of stacked reduced positions for exponent rows."""

    def __init__(self, n: int, max_degree: int):
        self.n = n
        self.max_degree = max_degree
        self.layout = MomentLayout(n, max_degree, reduced=True)
        self.radix = max_degree + 1
        if self.radix**n >= 2**62:
            raise OverflowError("monomial keys do not fit in 64 bits")
        self._weights = self.radix ** np.arange(n - 1, -1, -1, dtype=np.int64)
        exps = np.vstack([exponent_array(n, j) for j in range(max_degree + 1)])
        self.exponents = exps
        keys = exps @ self._weights
        order = np.argsort(keys)
        self._keys = keys[order]
        self._positions = order

    def positions(self, exps: np.ndarray) -> np.ndarray:
        exps = np.asarray(exps, dtype=np.int64).reshape(-1, self.n)
        if exps.size and (exps.sum(axis=1).max() > self.max_degree or exps.min() < 0):
            raise ValueError("exponent rows outside the indexed degree range")
        keys = exps @ self._weights
        idx = np.searchsorted(self._keys, keys)
        return self._positions[idx]


def sparse_matmul(A, B) -> sp.csr_matrix:
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {B.shape}")
    return sp.csr_matrix(A @ B)


def sparse_matvec(A, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if A.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ ({v.shape[0]},)")
    return A @ v


def finalize(A) -> sp.csr_matrix:
    """Canonical CSR: duplicates summed, explicit zeros dropped, indices sorted."""
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A
