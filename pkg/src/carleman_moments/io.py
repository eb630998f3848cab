"""On-disk artifacts: sparse matrices, propagators, error expansions, manifests.

Sparse matrices are stored as a little-endian header of five unsigned 64-bit
integers ``(magic, version, rows, cols, nnz)`` followed by ``nnz`` records
``(u64 row, u64 col, f64 value)`` in row-major order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .carleman import TruncatedPropagator
from .errbound import ErrorExpansion
from .kron import MomentLayout, finalize

MAGIC = int.from_bytes(b"CMSPARSE", "little")
VERSION = 1
TOOL_VERSION = "0.1.0"

_HEADER = np.dtype("<u8")
_RECORD = np.dtype([("row", "<u8"), ("col", "<u8"), ("val", "<f8")])


class ArtifactError(RuntimeError):
    """Missing, corrupt or mismatched offline artifact."""


def write_sparse(path, A) -> None:
    A = finalize(A).tocoo()
    order = np.lexsort((A.col, A.row))
    rec = np.empty(A.nnz, dtype=_RECORD)
    rec["row"], rec["col"], rec["val"] = A.row[order], A.col[order], A.data[order]
    header = np.array([MAGIC, VERSION, A.shape[0], A.shape[1], A.nnz], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())


def read_sparse(path) -> sp.csr_matrix:
    raw = Path(path).read_bytes()
    if len(raw) < 40:
        raise ArtifactError(f"{path}: truncated header")
    magic, version, rows, cols, nnz = np.frombuffer(raw[:40], dtype=_HEADER)
    if magic != MAGIC:
        raise ArtifactError(f"{path}: not a sparse matrix file")
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported format version {version}")
    if len(raw) != 40 + int(nnz) * _RECORD.itemsize:
        raise ArtifactError(f"{path}: size does not match {nnz} entries")
    rec = np.frombuffer(raw[40:], dtype=_RECORD)
    return sp.csr_matrix(
        (rec["val"], (rec["row"].astype(np.int64), rec["col"].astype(np.int64))),
        shape=(int(rows), int(cols)),
    )


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArtifactError(f"missing artifact {path}") from None


def save_propagator(path, p: TruncatedPropagator) -> None:
    path = Path(path)
    write_sparse(path, p.matrix)
    _write_json(
        path.with_suffix(".json"),
        {"n": p.n, "nu": p.nu, "N_T": p.N_T, "reduced": p.reduced, "spec_hash": p.spec_hash},
    )


def load_propagator(path, spec_hash: str | None = None) -> TruncatedPropagator:
    path = Path(path)
    meta = _read_json(path.with_suffix(".json"))
    if spec_hash is not None and meta["spec_hash"] != spec_hash:
        raise ArtifactError(f"{path} was built for a different system")
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    matrix = read_sparse(path)
    size = MomentLayout(meta["n"], meta["N_T"], meta["reduced"]).size
    if matrix.shape != (size, size):
        raise ArtifactError(f"{path}: shape {matrix.shape} does not match its metadata")
    return TruncatedPropagator(
        meta["n"], meta["nu"], meta["N_T"], meta["reduced"], matrix, meta["spec_hash"]
    )


def expansion_filename(j0: int, t: int) -> str:
    return f"expansion_j{j0}_t{t}.bin"


def save_expansion(directory, exp: ErrorExpansion) -> dict:
    directory = Path(directory)
    name = expansion_filename(exp.j0, exp.t)
    write_sparse(directory / name, exp.vtilde)
    return {
        "j0": exp.j0,
        "t": exp.t,
        "N_T": exp.N_T,
        "max_degree": exp.max_degree,
        "reduced": exp.reduced,
        "n": exp.layout.n,
        "file": name,
    }


def load_expansion(directory, j0: int, t: int) -> ErrorExpansion:
    directory = Path(directory)
    manifest = read_manifest(directory)
    for entry in manifest.get("expansions", []):
        if entry["j0"] == j0 and entry["t"] == t:
            vtilde = read_sparse(directory / entry["file"])
            layout = MomentLayout(entry["n"], entry["max_degree"], entry["reduced"])
            if vtilde.shape[1] != layout.size:
                raise ArtifactError(f"{entry['file']}: width does not match its manifest entry")
            return ErrorExpansion(j0, t, entry["N_T"], vtilde, layout)
    raise ArtifactError(f"no offline error expansion for j0={j0}, t={t} in {directory}")


def write_manifest(directory, payload: dict) -> None:
    _write_json(Path(directory) / "manifest.json", {"tool_version": TOOL_VERSION, **payload})


def read_manifest(directory) -> dict:
    return _read_json(Path(directory) / "manifest.json")
