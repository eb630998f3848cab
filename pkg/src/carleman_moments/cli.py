"""Command-line interface.

``build`` does all the offline work (block assembly, error expansions) and
writes it to ``--out``; ``propagate``, ``bound`` and ``region`` only read those
artifacts and run sparse mat-vecs.  ``montecarlo`` and ``compare`` produce the
reference data.

Exit codes: 0 success, 2 configuration or artifact error, 3 resource budget
exceeded, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .carleman import (
    DEFAULT_MEM_BUDGET,
    ResourceBudgetError,
    build_propagator,
    exact_moment,
    initial_state,
    propagate,
)
from .errbound import (
    DEFAULT_WIDTH_BUDGET,
    STRATEGIES,
    ErrorCertificate,
    certify,
    error_expansion,
    select_subset,
    stacked_initial,
)
from .kron import exponent_array
from .model import QuadratureError, SpecError
from .oracle import empirical_coverage, empirical_moment, simulate, write_trajectories_csv
from .safety import (
    DegenerateMomentsError,
    SecondMomentView,
    build_safety_region,
    write_boundary_csv,
    write_regions_csv,
)
from .specfile import load_spec, state_index

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    spec: str
    out: Path
    mode: str | None = None
    nt: int = 8
    horizon: int = 2
    j0: tuple[int, ...] = (1, 2)
    bound: str = "K"
    strategy: str | None = None
    subset_size: int = 0
    prob_bound: float = 0.1
    alpha: float = 1.0
    dims: tuple[str, ...] | None = None
    seed: int = 0
    samples: int = 10_000
    mem_budget: int = DEFAULT_MEM_BUDGET
    shape: str = "ellipsoid"
    trajectories: bool = False

    def validate(self) -> "RunConfig":
        if self.mode not in (None, "full", "reduced"):
            raise ConfigError(f"mode must be full or reduced, got {self.mode!r}")
        if self.nt < 1:
            raise ConfigError("--nt must be at least 1")
        if self.horizon < 0:
            raise ConfigError("--horizon must be non-negative")
        if any(j < 0 for j in self.j0):
            raise ConfigError("--j0 values must be non-negative")
        if self.bound not in ("global", "J", "K", "exact"):
            raise ConfigError(f"unknown bound method {self.bound!r}")
        if self.strategy is not None and self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.subset_size < 0:
            raise ConfigError("--subset-size must be non-negative")
        if not 0 < self.prob_bound < 1:
            raise ConfigError("--prob-bound must lie in (0, 1)")
        if self.alpha <= 0:
            raise ConfigError("--alpha must be positive")
        if self.samples < 1:
            raise ConfigError("--samples must be positive")
        if self.mem_budget <= 0:
            raise ConfigError("--mem-budget must be positive")
        if self.shape not in ("ellipsoid", "ball"):
            raise ConfigError("--shape must be ellipsoid or ball")
        return self


def _load(cfg: RunConfig):
    spec = load_spec(cfg.spec)
    if cfg.mode is not None:
        spec = dataclasses.replace(spec, mode=cfg.mode)
    return spec


def _label(names, j: int, index: int, reduced: bool) -> str:
    if j == 0:
        return "1"
    n = len(names)
    if reduced:
        exps = exponent_array(n, j)[index]
        parts = [names[i] if e == 1 else f"{names[i]}^{e}" for i, e in enumerate(exps) if e]
        return "*".join(parts)
    digits = []
    for _ in range(j):
        digits.append(index % n)
        index //= n
    return "*".join(names[d] for d in reversed(digits))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh)


# -- offline -----------------------------------------------------------------


def cmd_build(cfg: RunConfig) -> int:
    """Assemble the truncated propagator and error expansions, then write them to disk."""
    spec = _load(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    p = build_propagator(spec, cfg.nt, mem_budget=cfg.mem_budget)
    built = time.perf_counter() - start
    io.save_propagator(out / "propagator.bin", p)
    entries = []
    for j0 in cfg.j0:
        if j0 > cfg.nt:
            raise ConfigError(f"j0={j0} exceeds the truncation limit {cfg.nt}")
        for t in range(cfg.horizon + 1):
            exp = error_expansion(spec, p, j0, t, DEFAULT_WIDTH_BUDGET, cfg.mem_budget)
            entries.append(io.save_expansion(out, exp))
    io.write_manifest(
        out,
        {
            "spec": cfg.spec,
            "spec_name": spec.name,
            "spec_hash": spec.content_hash(),
            "N_T": cfg.nt,
            "mode": "reduced" if p.reduced else "full",
            "propagator": "propagator.bin",
            "expansions": entries,
        },
    )
    total = time.perf_counter() - start
    blocks = (cfg.nt + 1) ** 2
    print(
        f"built E({cfg.nt},{cfg.nt}): {blocks} blocks, {p.matrix.shape[0]} rows, "
        f"{p.matrix.nnz} nonzeros in {built:.3f} s; "
        f"{len(entries)} error expansions, total {total:.3f} s"
    )
    return EXIT_OK


# -- online ------------------------------------------------------------------


def _online(cfg: RunConfig):
    spec = _load(cfg)
    out = Path(cfg.out)
    manifest = io.read_manifest(out)
    if manifest["spec_hash"] != spec.content_hash():
        raise io.ArtifactError(f"artifacts in {out} were built for a different system")
    p = io.load_propagator(out / manifest["propagator"], spec.content_hash())
    return spec, p


def _trajectory(spec, p, horizon):
    return propagate(p, initial_state(spec, p.N_T, p.reduced), horizon, trajectory=True)


def cmd_propagate(cfg: RunConfig) -> int:
    """Propagate stored initial moments through the saved propagator."""
    spec, p = _online(cfg)
    states = _trajectory(spec, p, cfg.horizon)
    fh, w = _writer(Path(cfg.out) / "moments.csv")
    with fh:
        w.writerow(["t", "degree", "index", "monomial", "value"])
        for st in states:
            for j in cfg.j0:
                if j > p.N_T:
                    raise ConfigError(f"degree {j} exceeds the truncation limit {p.N_T}")
                for i, v in enumerate(st.moment(j)):
                    w.writerow([st.t, j, i, _label(spec.state_names, j, i, p.reduced), _fmt(v)])
    return EXIT_OK


def _certificate(cfg: RunConfig, exp, y) -> ErrorCertificate:
    if cfg.bound in ("global", "exact"):
        return certify(exp, y, cfg.bound)
    if cfg.bound == "J":
        strategy = cfg.strategy or "largest-initial-moment"
        available = exp.max_degree + 1
    else:
        strategy = "largest-stacked-coordinate"
        available = exp.layout.size
    subset = select_subset(strategy, min(cfg.subset_size, available), exp, y)
    return certify(exp, y, cfg.bound, subset)


def _certificates(cfg, spec, degrees, times):
    out = {}
    for t in times:
        for j0 in degrees:
            exp = io.load_expansion(cfg.out, j0, t)
            out[(j0, t)] = _certificate(cfg, exp, stacked_initial(spec, exp))
    return out


def cmd_bound(cfg: RunConfig) -> int:
    """Write error certificates for the requested moment degrees."""
    spec, p = _online(cfg)
    certs = _certificates(cfg, spec, cfg.j0, range(cfg.horizon + 1))
    fh, w = _writer(Path(cfg.out) / "certificates.csv")
    with fh:
        w.writerow(["j0", "t", "method", "subset_size", "coordinate", "monomial", "bound"])
        for (j0, t), cert in sorted(certs.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            for i, b in enumerate(cert.bounds):
                label = _label(spec.state_names, j0, i, p.reduced)
                w.writerow([j0, t, cert.method, cert.subset_size, i, label, _fmt(b)])
    return EXIT_OK


def _dims(cfg, spec):
    if cfg.dims:
        return state_index(spec, cfg.dims)
    return list(spec.interest) or None


def _regions(cfg, spec, p):
    states = _trajectory(spec, p, cfg.horizon)
    certs = _certificates(cfg, spec, (1, 2), range(cfg.horizon + 1))
    dims = _dims(cfg, spec)
    regions = {}
    for st in states:
        view = SecondMomentView.from_state(st, certs[(1, st.t)], certs[(2, st.t)])
        regions[st.t] = build_safety_region(view, cfg.prob_bound, cfg.alpha, dims, cfg.shape)
    return regions


def cmd_region(cfg: RunConfig) -> int:
    """Write safety regions and their boundary points."""
    spec, p = _online(cfg)
    if p.N_T < 2:
        raise ConfigError("regions need second moments, build with --nt >= 2")
    regions = _regions(cfg, spec, p)
    write_regions_csv(Path(cfg.out) / "regions.csv", regions)
    if next(iter(regions.values())).dim == 2:
        write_boundary_csv(Path(cfg.out) / "boundary.csv", regions)
    return EXIT_OK


# -- reference data ----------------------------------------------------------


def cmd_montecarlo(cfg: RunConfig) -> int:
    """Simulate sample paths and write empirical moments."""
    spec = _load(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run = simulate(spec, cfg.samples, cfg.horizon, cfg.seed)
    fh, w = _writer(out / "empirical.csv")
    with fh:
        w.writerow(["t", "degree", "index", "monomial", "mean", "stderr"])
        for t in range(cfg.horizon + 1):
            for j in cfg.j0:
                mean, se = empirical_moment(run, j, t, reduced=True)
                for i, (m, s) in enumerate(zip(mean, se)):
                    w.writerow([t, j, i, _label(spec.state_names, j, i, True), _fmt(m), _fmt(s)])
    if cfg.trajectories:
        write_trajectories_csv(out / "trajectories.csv", run, list(spec.state_names))
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    """Truncated, exact and empirical moments side by side, plus region coverage."""
    spec, p = _online(cfg)
    if not p.reduced:
        spec = dataclasses.replace(spec, mode="full")
    states = _trajectory(spec, p, cfg.horizon)
    run = simulate(spec, cfg.samples, cfg.horizon, cfg.seed)
    fh, w = _writer(Path(cfg.out) / "compare.csv")
    with fh:
        w.writerow(["t", "degree", "index", "monomial", "truncated", "exact", "empirical", "stderr"])
        for st in states:
            for j in cfg.j0:
                try:
                    exact = exact_moment(spec, j, st.t, p.reduced, cfg.mem_budget)
                except ResourceBudgetError:
                    exact = None
                mean, se = empirical_moment(run, j, st.t, reduced=p.reduced)
                for i, v in enumerate(st.moment(j)):
                    w.writerow(
                        [
                            st.t, j, i, _label(spec.state_names, j, i, p.reduced), _fmt(v),
                            _fmt(None if exact is None else exact[i]), _fmt(mean[i]), _fmt(se[i]),
                        ]
                    )
    if p.N_T >= 2:
        try:
            regions = _regions(cfg, spec, p)
        except io.ArtifactError:
            return EXIT_OK
        fh, w = _writer(Path(cfg.out) / "coverage.csv")
        with fh:
            w.writerow(["t", "b", "radius", "volume", "outside_fraction"])
            for t, r in sorted(regions.items()):
                outside = 1.0 - empirical_coverage(run, r, t)
                w.writerow([t, r.prob_bound, _fmt(r.radius), _fmt(r.volume()), _fmt(outside)])
    return EXIT_OK


COMMANDS = {
    "build": cmd_build,
    "propagate": cmd_propagate,
    "bound": cmd_bound,
    "region": cmd_region,
    "montecarlo": cmd_montecarlo,
    "compare": cmd_compare,
}


def _csv_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _int_list(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in _csv_list(s))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True, help="YAML system file, or builtin:<name>")
    common.add_argument("--out", required=True, type=Path, help="artifact and output directory")
    common.add_argument("--mode", choices=("full", "reduced"), help="override the system's mode")
    common.add_argument("--nt", type=int, default=8, help="truncation limit (default 8)")
    common.add_argument("--horizon", type=int, default=2, help="last time step (default 2)")
    common.add_argument("--j0", type=_int_list, default=(1, 2), help="moment degrees, e.g. 1,2")
    common.add_argument("--bound", choices=("global", "J", "K", "exact"), default="K")
    common.add_argument("--strategy", choices=STRATEGIES, help="subset selection for --bound J")
    common.add_argument(
        "--subset-size", type=int, default=0, help="subset size (clamped to the available indices)"
    )
    common.add_argument("--prob-bound", type=float, default=0.1, help="b: allowed outside probability")
    common.add_argument("--alpha", type=float, default=1.0)
    common.add_argument("--dims", type=_csv_list, help="dimensions of interest, names or indices")
    common.add_argument("--shape", choices=("ellipsoid", "ball"), default="ellipsoid")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--samples", type=int, default=10_000)
    common.add_argument("--trajectories", action="store_true", help="also dump sample paths")
    common.add_argument(
        "--mem-budget", type=float, default=DEFAULT_MEM_BUDGET / 2**20, help="MiB (default 1024)"
    )
    parser = argparse.ArgumentParser(prog="carleman-moments", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).split("\n")[0])
    return parser


def config_from_args(args) -> RunConfig:
    return RunConfig(
        spec=args.spec,
        out=args.out,
        mode=args.mode,
        nt=args.nt,
        horizon=args.horizon,
        j0=args.j0,
        bound=args.bound,
        strategy=args.strategy,
        subset_size=args.subset_size,
        prob_bound=args.prob_bound,
        alpha=args.alpha,
        dims=args.dims,
        seed=args.seed,
        samples=args.samples,
        mem_budget=int(args.mem_budget * 2**20),
        shape=args.shape,
        trajectories=args.trajectories,
    ).validate()


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg)
    except ResourceBudgetError as exc:
        print(f"error: resource budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DegenerateMomentsError, QuadratureError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, ConfigError, io.ArtifactError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> None:
    sys.exit(run(argv))
