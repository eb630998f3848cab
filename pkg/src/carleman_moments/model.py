"""Stochastic polynomial systems with random coefficients.

A system is ``x(t+1) = sum_i F_i(t) x^[i](t)`` where every entry of ``F_i(t)``
is a polynomial in named noise symbols.  Each symbol is redrawn i.i.d. at
every step; distinct symbols are independent within a step, and entries that
share a symbol are dependent through it.
"""

from __future__ import annotations

import functools
import hashlib
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import sympy
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy import special

from .kron import MonomialIndexer, exponent_array, reduction_map


class SpecError(ValueError):
    """Invalid system declaration."""


class QuadratureError(ArithmeticError):
    """Quadrature did not reach the requested tolerance."""


_KINDS = ("uniform", "gaussian", "truncated_gaussian", "explicit")


@dataclass(frozen=True)
class NoiseDistribution:
    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SpecError(f"unknown distribution kind {self.kind!r}")
        p = self.params
        if self.kind == "uniform" and not (len(p) == 2 and p[0] < p[1]):
            raise SpecError(f"uniform needs low < high, got {p}")
        if self.kind == "gaussian" and not (len(p) == 2 and p[1] > 0):
            raise SpecError(f"gaussian needs sigma > 0, got {p}")
        if self.kind == "truncated_gaussian" and not (
            len(p) == 4 and p[1] > 0 and p[2] < p[3]
        ):
            raise SpecError(f"truncated gaussian needs sigma > 0 and low < high, got {p}")
        if self.kind == "explicit" and not (len(p) >= 1 and p[0] == 1.0):
            raise SpecError("explicit moments must start with m_0 = 1")

    @classmethod
    def uniform(cls, low, high):
        return cls("uniform", (float(low), float(high)))

    @classmethod
    def gaussian(cls, mean, std):
        return cls("gaussian", (float(mean), float(std)))

    @classmethod
    def truncated_gaussian(cls, mean, std, low, high):
        return cls("truncated_gaussian", (float(mean), float(std), float(low), float(high)))

    @classmethod
    def explicit(cls, moments):
        return cls("explicit", tuple(float(m) for m in moments))

    def moment(self, k: int) -> float:
        return float(self.moments(k)[k])

    def moments(self, K: int) -> np.ndarray:
        """``[E w^0, ..., E w^K]`` (read-only; may be longer than ``K + 1``)."""
        if K < 0:
            raise ValueError("moment order must be non-negative")
        if self.kind == "explicit":
            if K >= len(self.params):
                raise ValueError(
                    f"moment {K} requested beyond stored horizon {len(self.params) - 1}"
                )
            return np.asarray(self.params)
        # quadrature tables are cached on a doubling grid of orders
        cap = 16
        while cap < K:
            cap *= 2
        return _moment_table(self, cap)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        p = self.params
        if self.kind == "uniform":
            return rng.uniform(p[0], p[1], size)
        if self.kind == "gaussian":
            return rng.normal(p[0], p[1], size)
        if self.kind == "truncated_gaussian":
            return _sample_truncated(rng, *p, size)
        raise NotImplementedError("no sampler for explicit-moment distributions")

    def quadrature(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """``m``-node rule whose weights integrate against this distribution."""
        p = self.params
        if self.kind == "gaussian":
            z, w = hermegauss(m)
            return p[0] + p[1] * z, w / np.sqrt(2 * np.pi)
        if self.kind == "uniform":
            z, w = leggauss(m)
            return 0.5 * (p[1] - p[0]) * z + 0.5 * (p[0] + p[1]), w / 2
        if self.kind == "truncated_gaussian":
            mu, sigma, lo, hi = p
            z, w = leggauss(m)
            x = 0.5 * (hi - lo) * z + 0.5 * (lo + hi)
            dens = np.exp(-0.5 * ((x - mu) / sigma) ** 2)
            w = w * dens
            return x, w / w.sum()
        raise SpecError("explicit-moment distributions cannot serve as quadrature base")

    @property
    def exact_polynomial_quadrature(self) -> bool:
        return self.kind in ("gaussian", "uniform")

    def describe(self) -> str:
        return f"{self.kind}{self.params}"


def _uniform_moments(a, b, K):
    k = np.arange(K + 1)
    return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))


def _gaussian_moments(mu, sigma, K):
    m = np.zeros(K + 1)
    m[0] = 1.0
    if K >= 1:
        m[1] = mu
    for k in range(2, K + 1):
        m[k] = mu * m[k - 1] + (k - 1) * sigma**2 * m[k - 2]
    return m


def _truncated_moments(mu, sigma, lo, hi, K, rtol=1e-12):
    def rule(nodes):
        z, w = leggauss(nodes)
        x = 0.5 * (hi - lo) * z + 0.5 * (lo + hi)
        w = w * np.exp(-0.5 * ((x - mu) / sigma) ** 2)
        powers = x[:, None] ** np.arange(K + 1)[None, :]
        return (w @ powers) / w.sum(), (w @ np.abs(powers)) / w.sum()

    nodes = 32
    prev, _ = rule(nodes)
    while nodes <= 4096:
        nodes *= 2
        cur, scale = rule(nodes)
        if np.all(np.abs(cur - prev) <= rtol * scale):
            return cur
        prev = cur
    raise QuadratureError("truncated gaussian moments did not converge")


@functools.lru_cache(maxsize=256)
def _moment_table(dist: NoiseDistribution, K: int) -> np.ndarray:
    p = dist.params
    if dist.kind == "uniform":
        m = _uniform_moments(p[0], p[1], K)
    elif dist.kind == "gaussian":
        m = _gaussian_moments(p[0], p[1], K)
    else:
        m = _truncated_moments(*p, K)
    m.setflags(write=False)
    return m


def _sample_truncated(rng, mu, sigma, lo, hi, size):
    accept = special.ndtr((hi - mu) / sigma) - special.ndtr((lo - mu) / sigma)
    if accept < 1e-4:
        raise NotImplementedError("rejection sampling is impractical for this truncation")
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        draw = rng.normal(mu, sigma, int(need / accept) + 16)
        draw = draw[(draw >= lo) & (draw <= hi)][:need]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def noise_moment(d: NoiseDistribution, k: int) -> float:
    """``E[w^k]`` for ``w ~ d``."""
    return d.moment(k)


# -- noise polynomials -------------------------------------------------------


def _mono_mul(a: tuple, b: tuple) -> tuple:
    if not a:
        return b
    if not b:
        return a
    merged = dict(a)
    for name, e in b:
        merged[name] = merged.get(name, 0) + e
    return tuple(sorted(merged.items()))


class NoisePolynomial:
    """Polynomial in noise symbols.

    ``terms`` maps a monomial, a sorted tuple of ``(symbol, exponent)`` pairs,
    to its coefficient; the empty tuple is the constant monomial.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[tuple, float] | None = None):
        self.terms = {m: float(c) for m, c in (terms or {}).items() if c != 0}

    @classmethod
    def constant(cls, c: float) -> "NoisePolynomial":
        return cls({(): c})

    @classmethod
    def symbol(cls, name: str, power: int = 1) -> "NoisePolynomial":
        return cls({((name, power),) if power else (): 1.0})

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def symbols(self) -> set[str]:
        return {name for mono in self.terms for name, _ in mono}

    def degree_in(self, name: str) -> int:
        return max((dict(m).get(name, 0) for m in self.terms), default=0)

    def _coerce(self, other):
        if isinstance(other, NoisePolynomial):
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return NoisePolynomial.constant(float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return NoisePolynomial(out)

    __radd__ = __add__

    def __neg__(self):
        return NoisePolynomial({m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict[tuple, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = _mono_mul(m1, m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return NoisePolynomial(out)

    __rmul__ = __mul__

    def __eq__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return False
        return self.terms == other.terms

    __hash__ = None

    def expectation(self, dists: Mapping[str, NoiseDistribution]) -> float:
        total = 0.0
        for mono, c in self.terms.items():
            for name, e in mono:
                c *= dists[name].moment(e)
            total += c
        return total

    def canonical(self) -> str:
        parts = []
        for mono, c in sorted(self.terms.items()):
            factors = "".join(f"*{name}^{e}" for name, e in mono)
            parts.append(f"{c!r}{factors}")
        return " + ".join(parts) if parts else "0"

    def __repr__(self):
        return f"NoisePolynomial({self.canonical()})"


def poly_multiply(p: NoisePolynomial, q: NoisePolynomial) -> NoisePolynomial:
    return p * q


def poly_expectation(p: NoisePolynomial, dists: Mapping[str, NoiseDistribution]) -> float:
    missing = p.symbols() - set(dists)
    if missing:
        raise SpecError(f"no distribution for noise symbols {sorted(missing)}")
    return p.expectation(dists)


# -- initial state models ----------------------------------------------------


class InitialStateModel:
    """Source of the initial moments ``E[x_ini^[j]]``."""

    kind = "abstract"
    n: int
    max_degree: int | None = None

    def monomial_moments(self, exps: np.ndarray) -> np.ndarray:
        """``E[prod_i x_i^{e_i}]`` for each row ``e`` of ``exps``."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError(f"no sampler for {self.kind} initial states")

    def describe(self) -> dict:
        raise NotImplementedError


class IndependentInitialState(InitialStateModel):
    kind = "independent"

    def __init__(self, marginals: Sequence[NoiseDistribution]):
        self.marginals = tuple(marginals)
        self.n = len(self.marginals)

    def monomial_moments(self, exps):
        exps = np.asarray(exps, dtype=np.int64).reshape(-1, self.n)
        out = np.ones(exps.shape[0])
        for i, d in enumerate(self.marginals):
            col = exps[:, i]
            if col.size and col.max() > 0:
                out *= d.moments(int(col.max()))[col]
        return out

    def sample(self, rng, size):
        return np.column_stack([d.sample(rng, size) for d in self.marginals])

    def describe(self):
        return {"kind": self.kind, "marginals": [d.describe() for d in self.marginals]}


_TRIG = (sympy.sin, sympy.cos)


def _check_map(expr, base_syms):
    """Allow polynomials in the base variables and sin/cos of affine forms."""
    if expr.is_Number or expr.is_Symbol:
        return
    if isinstance(expr, _TRIG):
        arg = expr.args[0]
        try:
            deg = sympy.Poly(arg, *base_syms).total_degree() if base_syms else 0
        except sympy.PolynomialError as exc:
            raise SpecError(f"trig argument {arg} is not affine") from exc
        if deg > 1:
            raise SpecError(f"trig argument {arg} is not affine")
        return
    if expr.is_Pow:
        base, e = expr.args
        if not (e.is_Integer and e >= 0):
            raise SpecError(f"unsupported power {expr} in initial-state map")
        _check_map(base, base_syms)
        return
    if expr.is_Add or expr.is_Mul:
        for a in expr.args:
            _check_map(a, base_syms)
        return
    raise SpecError(f"unsupported construct {expr} in initial-state map")


class FunctionalInitialState(InitialStateModel):
    """``x_i = g_i(w)`` for an independent base vector ``w``.

    Each ``g_i`` is a polynomial in ``w`` or contains sin/cos of affine forms
    in ``w``.  Coordinates that share no base variable are independent, so
    moments factor over groups of coordinates linked by shared variables.
    """

    kind = "functional"

    def __init__(self, base: Mapping[str, NoiseDistribution], maps: Sequence, rtol=1e-10):
        self.base = dict(base)
        self.rtol = rtol
        syms = {name: sympy.Symbol(name) for name in self.base}
        self._syms = syms
        exprs = []
        for m in maps:
            expr = sympy.sympify(m, locals=syms) if isinstance(m, str) else sympy.sympify(m)
            unknown = {s.name for s in expr.free_symbols} - set(syms)
            if unknown:
                raise SpecError(f"initial-state map {m} uses undeclared symbols {sorted(unknown)}")
            _check_map(expr, list(syms.values()))
            exprs.append(expr)
        self.maps = tuple(exprs)
        self.n = len(exprs)
        self._groups = self._build_groups()

    def _build_groups(self):
        uses = [{s.name for s in e.free_symbols} for e in self.maps]
        parent = list(range(self.n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(self.n):
            for j in range(i):
                if uses[i] & uses[j]:
                    parent[find(i)] = find(j)
        groups: dict[int, list[int]] = {}
        for i in range(self.n):
            groups.setdefault(find(i), []).append(i)
        out = []
        for coords in groups.values():
            names = sorted(set().union(*(uses[i] for i in coords)))
            out.append(_MapGroup(coords, names, [self.maps[i] for i in coords], self))
        return out

    def monomial_moments(self, exps):
        exps = np.asarray(exps, dtype=np.int64).reshape(-1, self.n)
        out = np.ones(exps.shape[0])
        for g in self._groups:
            sub = exps[:, g.coords]
            rows, inverse = np.unique(sub, axis=0, return_inverse=True)
            out *= g.moments(rows)[inverse.ravel()]
        return out

    def sample(self, rng, size):
        w = {name: d.sample(rng, size) for name, d in self.base.items()}
        cols = []
        for expr in self.maps:
            f = sympy.lambdify([self._syms[k] for k in self.base], expr, "numpy")
            cols.append(np.broadcast_to(f(*w.values()), (size,)).astype(float))
        return np.column_stack(cols)

    def describe(self):
        return {
            "kind": self.kind,
            "base": {k: d.describe() for k, d in self.base.items()},
            "maps": [sympy.srepr(e) for e in self.maps],
        }


class _MapGroup:
    def __init__(self, coords, names, exprs, owner: FunctionalInitialState):
        self.coords = coords
        self.names = names
        self.dists = [owner.base[k] for k in names]
        self.rtol = owner.rtol
        syms = [owner._syms[k] for k in names]
        self.funcs = [sympy.lambdify(syms, e, "numpy") for e in exprs]
        self.polynomial = all(not e.has(*_TRIG) for e in exprs) and all(
            d.exact_polynomial_quadrature for d in self.dists
        )
        if self.polynomial and syms:
            self.degrees = np.array(
                [[sympy.Poly(e, *syms).degree(s) for s in syms] for e in exprs]
            ).reshape(len(exprs), len(syms))
        else:
            self.degrees = None

    def _evaluate(self, rows, nodes_per_var):
        grids = [d.quadrature(m) for d, m in zip(self.dists, nodes_per_var)]
        pts = np.meshgrid(*[g[0] for g in grids], indexing="ij")
        wts = np.meshgrid(*[g[1] for g in grids], indexing="ij")
        pts = [p.ravel() for p in pts]
        weight = np.prod([w.ravel() for w in wts], axis=0)
        vals = np.column_stack(
            [np.broadcast_to(f(*pts), weight.shape).astype(float) for f in self.funcs]
        )
        mono = np.ones((weight.size, rows.shape[0]))
        for i in range(rows.shape[1]):
            mono *= vals[:, i : i + 1] ** rows[None, :, i]
        return weight @ mono, np.abs(weight) @ np.abs(mono)

    def moments(self, rows: np.ndarray) -> np.ndarray:
        if not self.names:
            vals = np.array([float(f()) for f in self.funcs])
            return np.prod(vals[None, :] ** rows, axis=1)
        if self.degrees is not None:
            need = rows @ self.degrees  # per-row degree in each base variable
            nodes = need.max(axis=0) // 2 + 1
            return self._evaluate(rows, nodes)[0]
        nodes = np.full(len(self.names), 16)
        prev, _ = self._evaluate(rows, nodes)
        while nodes.prod() < 4_000_000:
            nodes = nodes * 2
            cur, scale = self._evaluate(rows, nodes)
            if np.all(np.abs(cur - prev) <= self.rtol * np.maximum(scale, 1e-300)):
                return cur
            prev = cur
        raise QuadratureError(f"initial moments over {self.names} did not converge")


class ExplicitInitialState(InitialStateModel):
    """Initial moments given verbatim as reduced vectors, degree 0 to ``K``."""

    kind = "explicit"

    def __init__(self, n: int, moments: Sequence[Sequence[float]]):
        self.n = n
        blocks = []
        for j, vec in enumerate(moments):
            vec = np.asarray(vec, dtype=float).ravel()
            expected = exponent_array(n, j).shape[0]
            if vec.size == n**j and vec.size != expected:
                vec = reduction_map(n, j).compress(vec)
            if vec.size != expected:
                raise SpecError(f"explicit moment block {j} has {vec.size} entries")
            blocks.append(vec)
        if not blocks or blocks[0][0] != 1.0:
            raise SpecError("explicit initial moments must start with E[x^[0]] = 1")
        self.max_degree = len(blocks) - 1
        self._values = np.concatenate(blocks)
        self._indexer = MonomialIndexer(n, self.max_degree)

    def monomial_moments(self, exps):
        exps = np.asarray(exps, dtype=np.int64).reshape(-1, self.n)
        if exps.size and exps.sum(axis=1).max() > self.max_degree:
            raise ValueError(
                f"initial moments requested beyond stored horizon {self.max_degree}"
            )
        return self._values[self._indexer.positions(exps)]

    def describe(self):
        return {"kind": self.kind, "values": self._values.tolist()}


def initial_moments(model: InitialStateModel, jmax: int, reduced: bool) -> list[np.ndarray]:
    """``[E x_ini^[0], ..., E x_ini^[jmax]]`` in reduced or full coordinates."""
    if jmax < 0:
        raise ValueError("jmax must be non-negative")
    if model.max_degree is not None and jmax > model.max_degree:
        raise ValueError(
            f"initial moments requested up to {jmax}, stored horizon is {model.max_degree}"
        )
    exps = np.vstack([exponent_array(model.n, j) for j in range(jmax + 1)])
    values = model.monomial_moments(exps)
    out, start = [], 0
    for j in range(jmax + 1):
        size = exponent_array(model.n, j).shape[0]
        block = values[start : start + size]
        start += size
        out.append(block if reduced else reduction_map(model.n, j).expand(block))
    return out


def stacked_initial_moments(model: InitialStateModel, jmax: int, reduced: bool) -> np.ndarray:
    return np.concatenate(initial_moments(model, jmax, reduced))


# -- systems -----------------------------------------------------------------


@dataclass(frozen=True)
class SystemSpec:
    """Coefficients are stored in full Kronecker columns.

    ``coefficients[i]`` maps ``(row, column)`` with ``column < n**i`` to the
    noise polynomial at that entry of ``F_i``.
    """

    n: int
    degree: int
    coefficients: tuple[dict, ...]
    noise: Mapping[str, NoiseDistribution]
    initial: InitialStateModel
    mode: str = "reduced"
    state_names: tuple[str, ...] = ()
    name: str = ""
    interest: tuple[int, ...] = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.degree < 0:
            raise SpecError("need n >= 1 and degree >= 0")
        if len(self.coefficients) != self.degree + 1:
            raise SpecError(
                f"expected {self.degree + 1} coefficient matrices, got {len(self.coefficients)}"
            )
        if self.mode not in ("full", "reduced"):
            raise SpecError(f"mode must be 'full' or 'reduced', got {self.mode!r}")
        if self.initial.n != self.n:
            raise SpecError("initial-state dimension does not match the system")
        for i, F in enumerate(self.coefficients):
            for (r, c), poly in F.items():
                if not (0 <= r < self.n and 0 <= c < self.n**i):
                    raise SpecError(f"F_{i} entry ({r}, {c}) out of range")
                unknown = poly.symbols() - set(self.noise)
                if unknown:
                    raise SpecError(f"F_{i} entry ({r}, {c}) uses undeclared {sorted(unknown)}")
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i + 1}" for i in range(self.n)))

    @property
    def noise_symbols(self) -> tuple[str, ...]:
        return tuple(self.noise)

    def use_reduced(self, reduced: bool | None) -> bool:
        return self.mode == "reduced" if reduced is None else bool(reduced)

    def reduced_coefficients(self, i: int) -> dict:
        """``F̂_i``: columns of ``F_i`` summed per monomial."""
        target = reduction_map(self.n, i).target
        out: dict = {}
        for (r, c), poly in self.coefficients[i].items():
            key = (r, int(target[c]))
            out[key] = out[key] + poly if key in out else poly
        return {k: p for k, p in out.items() if not p.is_zero}

    def row_terms(self) -> list[list[tuple[tuple[int, ...], NoisePolynomial]]]:
        """Per state row, the (state exponent, noise coefficient) terms of ``x_r(t+1)``."""
        if "row_terms" not in self._cache:
            rows: list[dict] = [dict() for _ in range(self.n)]
            for i in range(self.degree + 1):
                exps = exponent_array(self.n, i)
                for (r, col), poly in self.reduced_coefficients(i).items():
                    key = tuple(int(e) for e in exps[col])
                    rows[r][key] = rows[r][key] + poly if key in rows[r] else poly
            self._cache["row_terms"] = [
                [(k, p) for k, p in sorted(row.items(), reverse=True) if not p.is_zero]
                for row in rows
            ]
        return self._cache["row_terms"]

    def max_row_terms(self) -> int:
        return max((len(t) for t in self.row_terms()), default=0)

    def content_hash(self) -> str:
        payload = {
            "n": self.n,
            "degree": self.degree,
            "coefficients": [
                sorted((f"{r},{c}", p.canonical()) for (r, c), p in F.items())
                for F in self.coefficients
            ],
            "noise": {k: d.describe() for k, d in self.noise.items()},
            "initial": self.initial.describe(),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
