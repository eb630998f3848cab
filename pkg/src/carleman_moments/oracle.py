"""Independent reference computations used to check the moment machinery.

Monte Carlo simulation evaluates the dynamics sample by sample in plain
arithmetic, the max-det checker is a brute-force grid search, and the small
error expansion sums the truncation error term by term.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .carleman import expected_block
from .kron import exponent_array, reduction_map
from .model import SystemSpec, stacked_initial_moments
from .safety import SafetyEllipsoid


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator, reproducible across platforms."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SimulationRun:
    seed: int
    samples: int
    horizon: int
    trajectories: np.ndarray  # (samples, horizon + 1, n)

    def states(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.horizon:
            raise ValueError(f"t={t} outside simulated horizon {self.horizon}")
        return self.trajectories[:, t, :]


def _column_digits(n: int, degree: int, col: int) -> list[int]:
    digits = []
    for _ in range(degree):
        digits.append(col % n)
        col //= n
    return digits[::-1]


def _step(spec: SystemSpec, x: np.ndarray, w: dict[str, np.ndarray]) -> np.ndarray:
    out = np.zeros_like(x)
    for i, F in enumerate(spec.coefficients):
        for (r, c), poly in F.items():
            coef = np.zeros(x.shape[0])
            for mono, value in poly.terms.items():
                term = np.full(x.shape[0], value)
                for name, e in mono:
                    term *= w[name] ** e
                coef += term
            for d in _column_digits(spec.n, i, c):
                coef = coef * x[:, d]
            out[:, r] += coef
    return out


def simulate(spec: SystemSpec, samples: int, horizon: int, seed: int = 0, batch_size: int | None = None) -> SimulationRun:
    """Sample trajectories; noise symbols are redrawn independently at every step.

    Batches use child seeds spawned from ``seed``, so results depend on
    ``batch_size`` but never on how batches are scheduled.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    batch_size = batch_size or samples
    sizes = [min(batch_size, samples - s) for s in range(0, samples, batch_size)]
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    out = np.empty((samples, horizon + 1, spec.n))
    start = 0
    for size, child in zip(sizes, children):
        rng = make_rng(child)
        x = np.asarray(spec.initial.sample(rng, size), dtype=float).reshape(size, spec.n)
        out[start : start + size, 0] = x
        for t in range(1, horizon + 1):
            w = {name: d.sample(rng, size) for name, d in spec.noise.items()}
            x = _step(spec, x, w)
            out[start : start + size, t] = x
        start += size
    return SimulationRun(seed, samples, horizon, out)


def _powers(x: np.ndarray, j: int, reduced: bool) -> np.ndarray:
    n = x.shape[1]
    exps = exponent_array(n, j)
    mono = np.ones((x.shape[0], exps.shape[0]))
    for i in range(n):
        col = exps[:, i]
        if col.any():
            mono *= x[:, i : i + 1] ** col[None, :]
    return mono if reduced else mono[:, reduction_map(n, j).target]


def empirical_moment(run: SimulationRun, j: int, t: int, reduced: bool = True):
    """Sample mean of ``x^[j](t)`` and its standard error."""
    vals = _powers(run.states(t), j, reduced)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(run.samples) if run.samples > 1 else np.zeros_like(mean)
    return mean, se


def empirical_coverage(run: SimulationRun, region: SafetyEllipsoid, t: int) -> float:
    """Fraction of samples inside ``region`` at step ``t``."""
    return float(region.contains(run.states(t)).mean())


def write_trajectories_csv(path, run: SimulationRun, names=None) -> None:
    n = run.trajectories.shape[2]
    names = names or [f"x{i + 1}" for i in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", *names])
        for s in range(run.samples):
            for t in range(run.horizon + 1):
                w.writerow([s, t, *(repr(float(v)) for v in run.trajectories[s, t])])


@dataclass(frozen=True)
class GridResult:
    feasible: bool
    Q: np.ndarray | None
    logdet: float
    evaluated: int


def grid_maxdet_check(C, b: float, alpha: float = 1.0, points: int = 10**4, rounds: int = 1, qmax: float | None = None) -> GridResult:
    """Brute-force max of ``log det Q`` over PD 2x2 ``Q`` with ``<Q, C> <= b alpha^2``.

    ``Q = [[q1, r sqrt(q1 q2)], [r sqrt(q1 q2), q2]]`` is gridded over
    ``0 < q1, q2 <= qmax`` and ``|r| < 1``.  Feasibility forces
    ``tr Q <= b alpha^2 / lambda_min(C)``, the default ``qmax``.  Extra
    ``rounds`` zoom the grid around the best point found so far.
    """
    C = np.asarray(C, dtype=float)
    if C.shape != (2, 2):
        raise ValueError("grid check is implemented for 2x2 covariances")
    budget = b * alpha**2
    if qmax is None:
        qmax = budget / np.linalg.eigvalsh(C)[0]
    per_axis = max(2, int(round(points ** (1 / 3))))
    box = [(qmax / per_axis / 2, qmax), (qmax / per_axis / 2, qmax), (-1 + 1e-9, 1 - 1e-9)]
    best_Q, best_ld, evaluated = None, -np.inf, 0
    for _ in range(rounds):
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
        q1, q2, r = (a.ravel() for a in np.meshgrid(*axes, indexing="ij"))
        q12 = r * np.sqrt(q1 * q2)
        load = q1 * C[0, 0] + q2 * C[1, 1] + 2 * q12 * C[0, 1]
        ok = load <= budget
        evaluated += q1.size
        if ok.any():
            ld = np.log(q1 * q2 - q12**2)
            ld[~ok] = -np.inf
            k = int(np.argmax(ld))
            if ld[k] > best_ld:
                best_ld = float(ld[k])
                best_Q = np.array([[q1[k], q12[k]], [q12[k], q2[k]]])
        if best_Q is None:
            break
        centre = (best_Q[0, 0], best_Q[1, 1], best_Q[0, 1] / np.sqrt(best_Q[0, 0] * best_Q[1, 1]))
        box = [
            (max(c - 2 * (hi - lo) / (per_axis - 1), lo if i == 2 else 1e-300), min(c + 2 * (hi - lo) / (per_axis - 1), hi))
            for i, (c, (lo, hi)) in enumerate(zip(centre, box))
        ]
    return GridResult(best_Q is not None, best_Q, best_ld, evaluated)


def direct_error_expansion_small(spec: SystemSpec, N_T: int, j0: int, t: int) -> np.ndarray:
    """Truncation error of ``E[x^j0(t)]`` summed line by line over degree paths.

    Line ``i`` collects the paths ``j0 -> j1 -> ... -> jt`` whose first
    ``i - 1`` degrees stay within ``N_T`` and whose ``i``-th degree exceeds it.
    Scalar systems and ``t <= 2`` only.
    """
    if spec.n != 1 or t > 2:
        raise ValueError("the direct expansion is limited to scalar systems and t <= 2")
    nu = spec.degree
    y = stacked_initial_moments(spec.initial, j0 * nu**t, reduced=True)
    cache = {}

    def E(j, k):
        if k > j * nu:
            return 0.0
        if (j, k) not in cache:
            m = expected_block(spec, j, k, reduced=True).matrix
            cache[(j, k)] = float(m[0, 0]) if m.nnz else 0.0
        return cache[(j, k)]

    total = 0.0
    for line in range(1, t + 1):
        def ranges(prev, step):
            if step < line:
                return range(0, min(N_T, prev * nu) + 1)
            if step == line:
                return range(N_T + 1, prev * nu + 1)
            return range(0, prev * nu + 1)

        def walk(prev, step):
            if step > t:
                return y[prev]
            return sum(E(prev, j) * walk(j, step + 1) for j in ranges(prev, step))

        total += walk(j0, 1)
    return np.array([total])
