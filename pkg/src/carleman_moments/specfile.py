"""Loading systems from YAML declarations.

A declaration looks like::

    name: logistic
    state: [x]
    degree: 2
    constants: {k: 0.5}
    noise:
      r: {distribution: uniform, low: 0.4, high: 0.6}
    dynamics:
      x: "r*x - r*x**2"
    initial:
      kind: independent
      marginals:
        x: {distribution: truncated_gaussian, mean: 0.5, std: 0.1, low: 0, high: 1}

Instead of ``dynamics`` a list of ``coefficients`` may be given, each with a
``row``, a ``monomial`` (exponent list or ``{state: power}``) or a full Kronecker
``column`` with its ``degree``, and a ``value`` expression in the noise symbols.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import sympy
import yaml

from .kron import exponent_array, reduction_map
from .model import (
    ExplicitInitialState,
    FunctionalInitialState,
    IndependentInitialState,
    NoiseDistribution,
    NoisePolynomial,
    SpecError,
    SystemSpec,
)

_TOP_KEYS = {
    "name", "state", "n", "degree", "mode", "constants", "noise",
    "dynamics", "coefficients", "initial", "description", "interest",
}
_JOINT_KEYS = {"correlation", "covariance", "joint", "copula"}


def parse_distribution(decl) -> NoiseDistribution:
    if not isinstance(decl, dict) or "distribution" not in decl:
        raise SpecError(f"distribution declaration needs a 'distribution' key: {decl!r}")
    if _JOINT_KEYS & set(decl):
        raise SpecError("joint or correlated distributions are not supported")
    kind = decl["distribution"]
    try:
        if kind == "uniform":
            return NoiseDistribution.uniform(decl["low"], decl["high"])
        if kind in ("gaussian", "normal"):
            return NoiseDistribution.gaussian(decl["mean"], decl["std"])
        if kind == "truncated_gaussian":
            return NoiseDistribution.truncated_gaussian(
                decl["mean"], decl["std"], decl["low"], decl["high"]
            )
        if kind == "explicit":
            return NoiseDistribution.explicit(decl["moments"])
    except KeyError as exc:
        raise SpecError(f"{kind} distribution is missing parameter {exc}") from None
    raise SpecError(f"unknown distribution {kind!r}")


def _constants(decl) -> dict:
    out = {}
    for name, value in (decl or {}).items():
        expr = sympy.sympify(str(value), locals={k.name: k for k in out}).subs(out)
        if expr.free_symbols:
            raise SpecError(f"constant {name} is not numeric: {value!r}")
        out[sympy.Symbol(name)] = sympy.Float(float(expr))
    return out


def _noise_poly(expr, noise_syms) -> NoisePolynomial:
    expr = sympy.expand(expr)
    if expr == 0:
        return NoisePolynomial()
    unknown = expr.free_symbols - set(noise_syms)
    if unknown:
        raise SpecError(f"undeclared symbols {sorted(s.name for s in unknown)}")
    if not noise_syms:
        return NoisePolynomial.constant(float(expr))
    try:
        poly = sympy.Poly(expr, *noise_syms)
    except sympy.PolynomialError as exc:
        raise SpecError(f"coefficient {expr} is not polynomial in the noise") from exc
    terms = {}
    for exps, c in poly.terms():
        mono = tuple((s.name, int(e)) for s, e in zip(noise_syms, exps) if e)
        terms[mono] = float(c)
    return NoisePolynomial(terms)


def _canonical_column(n: int, exps) -> tuple[int, int]:
    exps = tuple(int(e) for e in exps)
    degree = sum(exps)
    table = {tuple(e): i for i, e in enumerate(exponent_array(n, degree).tolist())}
    return degree, int(reduction_map(n, degree).representative[table[exps]])


def _from_dynamics(decl, state_syms, noise_syms, consts, degree):
    n = len(state_syms)
    coeffs = [dict() for _ in range(degree + 1)]
    names = {s.name: s for s in state_syms + noise_syms}
    for key in decl:
        if key not in names or names[key] not in state_syms:
            raise SpecError(f"dynamics given for unknown state {key!r}")
    for r, s in enumerate(state_syms):
        if s.name not in decl:
            raise SpecError(f"no dynamics for state {s.name}")
        expr = sympy.sympify(str(decl[s.name]), locals={**names, **{c.name: c for c in consts}})
        expr = sympy.expand(expr.subs(consts))
        unknown = expr.free_symbols - set(state_syms) - set(noise_syms)
        if unknown:
            raise SpecError(f"dynamics of {s.name} use undeclared {sorted(u.name for u in unknown)}")
        try:
            poly = sympy.Poly(expr, *state_syms)
        except sympy.PolynomialError as exc:
            raise SpecError(f"dynamics of {s.name} are not polynomial in the state") from exc
        for exps, c in poly.terms():
            d, col = _canonical_column(n, exps)
            if d > degree:
                raise SpecError(f"dynamics of {s.name} exceed declared degree {degree}")
            p = _noise_poly(c, noise_syms)
            if not p.is_zero:
                coeffs[d][(r, col)] = p
    return coeffs


def _from_coefficients(entries, state_names, noise_syms, consts, degree):
    n = len(state_names)
    coeffs = [dict() for _ in range(degree + 1)]
    locals_ = {s.name: s for s in noise_syms} | {c.name: c for c in consts}
    for entry in entries:
        row = entry["row"]
        r = state_names.index(row) if isinstance(row, str) else int(row)
        if "column" in entry:
            d, col = int(entry["degree"]), int(entry["column"])
            if not 0 <= col < n**d:
                raise SpecError(f"column {col} out of range for degree {d}")
        else:
            mono = entry["monomial"]
            if isinstance(mono, dict):
                exps = [0] * n
                for k, e in mono.items():
                    if k not in state_names:
                        raise SpecError(f"monomial uses unknown state {k!r}")
                    exps[state_names.index(k)] = int(e)
            else:
                exps = [int(e) for e in mono]
                if len(exps) != n:
                    raise SpecError(f"monomial {mono} does not have {n} exponents")
            d, col = _canonical_column(n, exps)
        if d > degree:
            raise SpecError(f"coefficient of degree {d} exceeds declared degree {degree}")
        expr = sympy.sympify(str(entry["value"]), locals=locals_).subs(consts)
        p = _noise_poly(expr, noise_syms)
        key = (r, col)
        coeffs[d][key] = coeffs[d][key] + p if key in coeffs[d] else p
    return [{k: p for k, p in F.items() if not p.is_zero} for F in coeffs]


def _initial(decl, state_names, consts):
    if not isinstance(decl, dict) or "kind" not in decl:
        raise SpecError("initial state needs a 'kind'")
    if _JOINT_KEYS & set(decl):
        raise SpecError("joint or correlated initial distributions are not supported")
    kind = decl["kind"]
    n = len(state_names)
    if kind == "independent":
        marg = decl.get("marginals", {})
        if set(marg) != set(state_names):
            raise SpecError("independent initial state needs one marginal per state")
        return IndependentInitialState([parse_distribution(marg[s]) for s in state_names])
    if kind == "functional":
        base = {k: parse_distribution(v) for k, v in decl.get("base", {}).items()}
        maps = decl.get("maps", {})
        if set(maps) != set(state_names):
            raise SpecError("functional initial state needs one map per state")
        syms = {k: sympy.Symbol(k) for k in base} | {c.name: c for c in consts}
        exprs = [sympy.sympify(str(maps[s]), locals=syms).subs(consts) for s in state_names]
        return FunctionalInitialState(base, exprs)
    if kind == "explicit":
        return ExplicitInitialState(n, decl["moments"])
    raise SpecError(f"unknown initial-state kind {kind!r}")


def spec_from_dict(decl: dict) -> SystemSpec:
    if not isinstance(decl, dict):
        raise SpecError("system declaration must be a mapping")
    extra = set(decl) - _TOP_KEYS
    if extra & _JOINT_KEYS:
        raise SpecError("joint or correlated distributions are not supported")
    if extra:
        raise SpecError(f"unknown keys {sorted(extra)}")
    if "state" in decl:
        state_names = [str(s) for s in decl["state"]]
    elif "n" in decl:
        state_names = [f"x{i + 1}" for i in range(int(decl["n"]))]
    else:
        raise SpecError("declare 'state' names or the dimension 'n'")
    if "n" in decl and int(decl["n"]) != len(state_names):
        raise SpecError("'n' disagrees with the number of state names")
    if "degree" not in decl:
        raise SpecError("missing polynomial 'degree'")
    degree = int(decl["degree"])
    consts = _constants(decl.get("constants"))
    noise = {k: parse_distribution(v) for k, v in (decl.get("noise") or {}).items()}
    clash = (set(noise) | {c.name for c in consts}) & set(state_names)
    if clash or set(noise) & {c.name for c in consts}:
        raise SpecError(f"name clash between state, noise and constants: {sorted(clash)}")
    state_syms = [sympy.Symbol(s) for s in state_names]
    noise_syms = [sympy.Symbol(s) for s in noise]
    if ("dynamics" in decl) == ("coefficients" in decl):
        raise SpecError("give exactly one of 'dynamics' and 'coefficients'")
    if "dynamics" in decl:
        coeffs = _from_dynamics(decl["dynamics"], state_syms, noise_syms, consts, degree)
    else:
        coeffs = _from_coefficients(decl["coefficients"], state_names, noise_syms, consts, degree)
    if "initial" not in decl:
        raise SpecError("missing 'initial' state declaration")
    initial = _initial(decl["initial"], state_names, consts)
    interest = tuple(
        state_names.index(s) if s in state_names else _bad_state(s) for s in decl.get("interest", ())
    )
    return SystemSpec(
        n=len(state_names),
        degree=degree,
        coefficients=tuple(coeffs),
        noise=noise,
        initial=initial,
        mode=decl.get("mode", "reduced"),
        state_names=tuple(state_names),
        name=str(decl.get("name", "")),
        interest=interest,
    )


def _bad_state(name):
    raise SpecError(f"unknown state {name!r} in 'interest'")


def load_spec(path) -> SystemSpec:
    """Parse a YAML file; ``builtin:<name>`` loads a bundled example."""
    path = str(path)
    if path.startswith("builtin:"):
        text = resources.files("carleman_moments.data").joinpath(f"{path[8:]}.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        decl = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"cannot parse {path}: {exc}") from exc
    return spec_from_dict(decl)


def builtin_names() -> list[str]:
    files = resources.files("carleman_moments.data").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".yaml"))


def state_index(spec: SystemSpec, names) -> list[int]:
    """Indices of the named (or 0-based numeric) state coordinates."""
    out = []
    for s in names:
        if isinstance(s, (int, np.integer)) or str(s).isdigit():
            out.append(int(s))
        elif s in spec.state_names:
            out.append(spec.state_names.index(s))
        else:
            raise SpecError(f"unknown state {s!r}")
    return out
