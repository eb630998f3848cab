"""Probabilistic safety regions from approximate first and second moments.

A region is the ellipsoid ``{x : ||x - m||_P <= alpha + eps}`` around the
approximate mean ``m``.  ``P = s Q`` where ``Q`` is the max-det matrix for the
approximate covariance, ``s`` absorbs the second-moment error bounds and
``eps`` bounds ``||E[x] - m||_P``.  By Markov's inequality the state lies in
the region with probability at least ``1 - b``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .carleman import MomentState, exact_moment
from .kron import reduction_map
from .model import SystemSpec


class DegenerateMomentsError(ArithmeticError):
    """Moment data admit no valid ellipsoid."""


def _expand_second(vec, n):
    vec = np.asarray(vec, dtype=float).ravel()
    if vec.size != n * n:
        vec = reduction_map(n, 2).expand(vec)
    M = vec.reshape(n, n)
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class SecondMomentView:
    """Approximate ``E[x]``, ``E[x x^T]`` and their elementwise error bounds.

    ``second[i, j]`` approximates ``E[x_i x_j]``, i.e. entry ``n*i + j`` of
    the (0-based) second Kronecker power.
    """

    mean: np.ndarray
    second: np.ndarray
    err1: np.ndarray
    err2: np.ndarray

    @classmethod
    def from_moments(cls, mean, second, err1=None, err2=None) -> "SecondMomentView":
        mean = np.asarray(mean, dtype=float).ravel()
        n = mean.size
        second = _expand_second(second, n)
        err1 = np.zeros(n) if err1 is None else np.abs(np.asarray(err1, dtype=float).ravel())
        err2 = np.zeros((n, n)) if err2 is None else np.abs(_expand_second(err2, n))
        return cls(mean, second, err1, err2)

    @classmethod
    def from_state(cls, state: MomentState, cert1=None, cert2=None) -> "SecondMomentView":
        return cls.from_moments(
            state.moment(1),
            state.moment(2),
            None if cert1 is None else cert1.bounds,
            None if cert2 is None else cert2.bounds,
        )

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def exact(self) -> bool:
        return not (self.err1.any() or self.err2.any())

    def covariance(self) -> np.ndarray:
        C = self.second - np.outer(self.mean, self.mean)
        return 0.5 * (C + C.T)

    def restrict(self, dims) -> "SecondMomentView":
        if dims is None:
            return self
        d = np.asarray(list(dims), dtype=int)
        return SecondMomentView(
            self.mean[d], self.second[np.ix_(d, d)], self.err1[d], self.err2[np.ix_(d, d)]
        )


def exact_view(spec: SystemSpec, t: int, reduced: bool | None = None) -> SecondMomentView:
    """View built from exact first and second moments at step ``t``."""
    return SecondMomentView.from_moments(
        exact_moment(spec, 1, t, reduced), exact_moment(spec, 2, t, reduced)
    )


def _product_range(lo_i, hi_i, lo_j, hi_j):
    corners = np.stack([lo_i * lo_j, lo_i * hi_j, hi_i * lo_j, hi_i * hi_j])
    return corners.min(axis=0), corners.max(axis=0)


def covariance_term_bounds(view: SecondMomentView, P) -> np.ndarray:
    """``T[i, j]``, the largest value of ``p_ij Cov_ij`` consistent with the error bounds.

    For ``p_ij > 0`` the second moment is taken at its upper end and the
    product of means at its lowest value over the admissible box; for
    ``p_ij < 0`` the other way round.  ``Cov_ij <= u_ij`` for ``P = 1``.
    """
    P = np.asarray(P, dtype=float)
    m, e1 = view.mean, view.err1
    lo, hi = m - e1, m + e1
    pmin, pmax = _product_range(lo[:, None], hi[:, None], lo[None, :], hi[None, :])
    # squares: the minimum over an interval containing 0 is 0
    sq_min = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(lo**2, hi**2))
    sq_max = np.maximum(lo**2, hi**2)
    idx = np.arange(view.n)
    pmin[idx, idx] = sq_min
    pmax[idx, idx] = sq_max
    upper = view.second + view.err2 - pmin
    lower = view.second - view.err2 - pmax
    return np.where(P >= 0, P * upper, P * lower)


def covariance_upper(view: SecondMomentView) -> np.ndarray:
    """``u_ij``: upper bounds on ``Cov_ij`` (used with non-negative weights)."""
    return covariance_term_bounds(view, np.ones((view.n, view.n)))


def tail_bound(view: SecondMomentView, P, alpha: float, eps: float = 0.0) -> float:
    """Upper bound on ``Prob(||x - mean||_P >= alpha)`` given ``||E x - mean||_P <= eps``."""
    if not alpha > eps >= 0:
        raise ValueError(f"need alpha > eps >= 0, got alpha={alpha}, eps={eps}")
    total = covariance_term_bounds(view, P).sum()
    return float(max(total, 0.0) / (alpha - eps) ** 2)


def _is_pd(C) -> bool:
    try:
        np.linalg.cholesky(C)
        return True
    except np.linalg.LinAlgError:
        return False


def _shape_cov(view: SecondMomentView) -> np.ndarray:
    """Covariance used to shape ``Q``.

    Truncated second moments can yield an indefinite covariance.  The shape
    step does not affect soundness (the rescale step does), so the
    error-aware upper bounds ``u_ij`` are used instead when that happens.
    """
    C = view.covariance()
    if _is_pd(C):
        return C
    if view.err1.any() or view.err2.any():
        U = covariance_upper(view)
        U = 0.5 * (U + U.T)
        if _is_pd(U):
            warnings.warn(
                "approximate covariance is indefinite; shaping with error-aware upper bounds",
                stacklevel=3,
            )
            return U
    n = C.shape[0]
    delta = 1e-10 * np.trace(C) / n
    if not delta > 0:
        raise DegenerateMomentsError("covariance has no positive variance")
    warnings.warn(f"covariance is not positive definite; adding ridge {delta:.3g}", stacklevel=3)
    C = C + delta * np.eye(n)
    if not _is_pd(C):
        raise DegenerateMomentsError("covariance is singular beyond the ridge tolerance")
    return C


def maxdet_ellipsoid(view: SecondMomentView, b: float, alpha: float = 1.0, dims=None, shape="ellipsoid"):
    """Max-det ``Q`` subject to ``<Q, C> <= b alpha^2`` for the approximate covariance ``C``.

    The optimum is ``(b alpha^2 / d) C^{-1}``.  With ``shape="ball"`` ``Q`` is
    restricted to multiples of the identity, giving ``(b alpha^2 / tr C) I``.
    """
    if not 0 < b < 1:
        raise ValueError("probability bound must lie in (0, 1)")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    v = view.restrict(dims)
    C = _shape_cov(v)
    d = C.shape[0]
    budget = b * alpha**2
    if shape == "ellipsoid":
        Q = budget / d * np.linalg.inv(C)
        return 0.5 * (Q + Q.T)
    if shape == "ball":
        return budget / np.trace(C) * np.eye(d)
    raise ValueError(f"unknown shape {shape!r}")


def rescale(Q, view: SecondMomentView, b: float, alpha: float = 1.0, dims=None):
    """``(s, sQ)`` with ``s = b alpha^2 / sum_ij q_ij u_ij`` (sign-aware ``u``)."""
    v = view.restrict(dims)
    denom = covariance_term_bounds(v, Q).sum()
    if not denom > 0:
        raise DegenerateMomentsError(f"non-positive worst-case spread {denom}")
    s = b * alpha**2 / denom
    return s, s * np.asarray(Q)


def epsilon_P(P, err1) -> float:
    """Bound on ``||E x - mean||_P`` from elementwise bounds ``|E x_i - mean_i| <= err1_i``.

    ``||v||_P <= sqrt(lambda_max(P)) ||v||_2`` and ``||v||_2 <= ||err1||_2``.
    """
    P = np.asarray(P, dtype=float)
    err1 = np.abs(np.asarray(err1, dtype=float).ravel())
    if not err1.any():
        return 0.0
    lam = np.linalg.eigvalsh(0.5 * (P + P.T))[-1]
    return float(math.sqrt(max(lam, 0.0)) * np.linalg.norm(err1))


@dataclass(frozen=True)
class SafetyEllipsoid:
    P: np.ndarray
    center: np.ndarray
    radius: float
    prob_bound: float
    alpha: float
    epsilon: float
    dims: tuple[int, ...] | None = None
    scale: float = 1.0

    @property
    def dim(self) -> int:
        return self.center.size

    def _project(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.dims is not None and x.shape[-1] != self.dim:
            x = x[..., list(self.dims)]
        return x

    def norm(self, x) -> np.ndarray:
        d = self._project(x) - self.center
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", d, self.P, d), 0.0))

    def contains(self, x) -> np.ndarray:
        return self.norm(x) <= self.radius

    def volume(self) -> float:
        d = self.dim
        unit = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
        return float(unit * self.radius**d / math.sqrt(np.linalg.det(self.P)))

    def area(self) -> float:
        if self.dim != 2:
            raise ValueError("area is defined for planar regions; use volume()")
        return self.volume()

    def boundary(self, points: int = 256) -> np.ndarray:
        if self.dim != 2:
            raise ValueError("boundary sampling is implemented for planar regions")
        theta = np.linspace(0.0, 2 * np.pi, points, endpoint=False)
        circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        L = np.linalg.cholesky(self.P)
        return self.center + self.radius * np.linalg.solve(L.T, circle.T).T


def build_safety_region(
    view: SecondMomentView, b: float = 0.1, alpha: float = 1.0, dims=None, shape: str = "ellipsoid"
) -> SafetyEllipsoid:
    """Max-det solve on the approximate covariance, rescale for errors, inflate the radius."""
    Q = maxdet_ellipsoid(view, b, alpha, dims, shape)
    s, P = rescale(Q, view, b, alpha, dims)
    v = view.restrict(dims)
    eps = epsilon_P(P, v.err1)
    return SafetyEllipsoid(
        P=P,
        center=v.mean.copy(),
        radius=alpha + eps,
        prob_bound=b,
        alpha=alpha,
        epsilon=eps,
        dims=None if dims is None else tuple(int(d) for d in dims),
        scale=s,
    )


def write_regions_csv(path, regions: dict[int, SafetyEllipsoid]) -> None:
    """One row per time step; ``P`` and ``center`` flattened row-major."""
    if not regions:
        raise ValueError("no regions to write")
    d = next(iter(regions.values())).dim
    header = ["t", "b", "alpha", "epsilon", "radius"]
    header += [f"P{i}{j}" for i in range(d) for j in range(d)]
    header += [f"center{i}" for i in range(d)] + ["volume"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, r in sorted(regions.items()):
            row = [t, r.prob_bound, r.alpha, r.epsilon, r.radius]
            row += [repr(float(v)) for v in r.P.ravel()]
            row += [repr(float(v)) for v in r.center] + [repr(r.volume())]
            w.writerow(row)


def write_boundary_csv(path, regions: dict[int, SafetyEllipsoid], points: int = 256) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "k", "x", "y"])
        for t, r in sorted(regions.items()):
            for k, (x, y) in enumerate(r.boundary(points)):
                w.writerow([t, k, repr(float(x)), repr(float(y))])
