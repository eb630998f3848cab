import json

import numpy as np
import pytest
import scipy.sparse as sp

from carleman_moments import build_propagator, load_spec
from carleman_moments import io
from carleman_moments.errbound import error_expansion


def test_sparse_round_trip(tmp_path):
    A = sp.random(7, 5, density=0.4, random_state=0, format="csr")
    io.write_sparse(tmp_path / "a.bin", A)
    B = io.read_sparse(tmp_path / "a.bin")
    assert B.shape == (7, 5)
    np.testing.assert_array_equal(A.toarray(), B.toarray())


def test_sparse_header_layout(tmp_path):
    A = sp.csr_matrix(np.array([[0.0, 2.5], [1.0, 0.0]]))
    io.write_sparse(tmp_path / "a.bin", A)
    raw = (tmp_path / "a.bin").read_bytes()
    header = np.frombuffer(raw[:40], dtype="<u8")
    assert raw[:8] == b"CMSPARSE"
    assert header[1:].tolist() == [1, 2, 2, 2]
    assert len(raw) == 40 + 2 * 24
    rec = np.frombuffer(raw[40:], dtype=[("r", "<u8"), ("c", "<u8"), ("v", "<f8")])
    assert rec["r"].tolist() == [0, 1] and rec["v"].tolist() == [2.5, 1.0]


@pytest.mark.parametrize("damage", ["truncate", "magic", "version"])
def test_corrupt_sparse_files_rejected(tmp_path, damage):
    path = tmp_path / "a.bin"
    io.write_sparse(path, sp.identity(3, format="csr"))
    raw = bytearray(path.read_bytes())
    if damage == "truncate":
        raw = raw[:-5]
    elif damage == "magic":
        raw[0:8] = b"XXXXXXXX"
    else:
        raw[8] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(io.ArtifactError):
        io.read_sparse(path)


def test_propagator_round_trip_and_hash_check(tmp_path):
    spec = load_spec("builtin:logistic")
    p = build_propagator(spec, 6)
    io.save_propagator(tmp_path / "p.bin", p)
    q = io.load_propagator(tmp_path / "p.bin", spec.content_hash())
    assert (q.n, q.nu, q.N_T, q.reduced) == (1, 2, 6, True)
    np.testing.assert_array_equal(q.matrix.toarray(), p.matrix.toarray())
    with pytest.raises(io.ArtifactError):
        io.load_propagator(tmp_path / "p.bin", "0" * 64)
    with pytest.raises(io.ArtifactError):
        io.load_propagator(tmp_path / "missing.bin")


def test_expansion_round_trip_through_manifest(tmp_path):
    spec = load_spec("builtin:planar")
    exp = error_expansion(spec, build_propagator(spec, 4), 2, 2)
    entry = io.save_expansion(tmp_path, exp)
    io.write_manifest(tmp_path, {"expansions": [entry]})
    back = io.load_expansion(tmp_path, 2, 2)
    assert back.layout == exp.layout and back.N_T == 4
    np.testing.assert_array_equal(back.vtilde.toarray(), exp.vtilde.toarray())
    assert json.loads((tmp_path / "manifest.json").read_text())["tool_version"] == io.TOOL_VERSION
    with pytest.raises(io.ArtifactError):
        io.load_expansion(tmp_path, 1, 2)


def test_missing_manifest(tmp_path):
    with pytest.raises(io.ArtifactError):
        io.read_manifest(tmp_path)
