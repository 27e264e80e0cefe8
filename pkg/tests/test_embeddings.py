import json
import struct

import numpy as np
import pytest

from promptfocus.embeddings import (CategoryLibrary, EmbeddingTable, SimilarityScores,
                                    image_class_similarity, load_fixture, save_fixture,
                                    supplement_library)
from promptfocus.errors import (ConfigurationError, ContractError, DataError,
                                FixtureFormatError)
from promptfocus.rng import RngState


def unit_rows(rng, n, d):
    rows = rng.normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_fixture(tmp_path, names, rows, name="fix.embt", source="initial"):
    path = tmp_path / name
    lib = CategoryLibrary(tuple(names), source=source)
    save_fixture(path, lib, EmbeddingTable(lib.names, rows))
    return path


# ---------------------------------------------------------------- type invariants


def test_library_rejects_casefold_duplicates():
    with pytest.raises(ContractError, match="duplicate"):
        CategoryLibrary(("bus", "car", " BUS "))
    with pytest.raises(ContractError):
        CategoryLibrary(())
    with pytest.raises(ContractError):
        CategoryLibrary(("bus", "  "))
    lib = CategoryLibrary((" bus ", "car"))
    assert lib.names == ("bus", "car")  # stored trimmed


def test_table_invariants():
    rows = unit_rows(RngState(0), 3, 8)
    t = EmbeddingTable(("a", "b", "c"), rows)
    assert t.dim == 8 and len(t) == 3
    assert t.index_of("b") == 1
    with pytest.raises(DataError, match="'zebra'"):
        t.index_of("zebra")
    with pytest.raises(ContractError):
        EmbeddingTable(("a", "b"), rows)  # count mismatch
    bad = rows.copy()
    bad[1] *= 1.5
    with pytest.raises(ContractError, match="'b'"):
        EmbeddingTable(("a", "b", "c"), bad)
    with pytest.raises(ValueError):
        t.rows[0, 0] = 5.0  # immutable after construction


def test_scores_invariants():
    SimilarityScores(np.array([0.25, 0.75]), normalized=True)
    SimilarityScores(np.array([3.0, -1.0]), normalized=False)
    with pytest.raises(ContractError):
        SimilarityScores(np.array([0.5, 0.6]), normalized=True)
    with pytest.raises(ContractError):
        SimilarityScores(np.array([-0.1, 1.1]), normalized=True)
    s = SimilarityScores(np.array([0.1, 0.9]), normalized=True)
    assert s.summary() == {"count": 2, "min": 0.1, "max": 0.9, "mean": 0.5}


# ---------------------------------------------------------------- fixture I/O


def test_round_trip_bit_identical(tmp_path):
    rows = unit_rows(RngState(7), 5, 16)
    path = make_fixture(tmp_path, [f"c{i}" for i in range(5)], rows)
    lib, table = load_fixture(path)
    assert lib.names == tuple(f"c{i}" for i in range(5))
    assert lib.source == "initial"
    assert table.rows.tobytes() == rows.tobytes()
    # write what was read: bytes on disk must match exactly
    out = tmp_path / "again.embt"
    save_fixture(out, lib, table)
    assert out.read_bytes() == path.read_bytes()


def test_well_formed_three_class_fixture(tmp_path):
    path = make_fixture(tmp_path, ["bus", "car", "tree"], np.eye(3))
    lib, table = load_fixture(path)
    assert len(lib) == 3 and table.rows.shape == (3, 3)


def test_truncation_reports_first_missing_byte(tmp_path):
    rows = unit_rows(RngState(1), 4, 8)
    path = make_fixture(tmp_path, list("abcd"), rows)
    blob = path.read_bytes()
    for cut in (len(blob) - 1, len(blob) - 17, 16, 9, 3):
        short = path.parent / "short.embt"
        short.write_bytes(blob[:cut])
        (path.parent / "short.json").write_text((path.parent / "fix.json").read_text())
        with pytest.raises(FixtureFormatError) as ei:
            load_fixture(short)
        assert ei.value.offset == cut
        assert f"byte offset {cut}" in str(ei.value)


def test_header_field_errors_carry_offsets(tmp_path):
    rows = unit_rows(RngState(2), 2, 4)
    path = make_fixture(tmp_path, ["x", "y"], rows)
    blob = bytearray(path.read_bytes())

    def reload(mutated):
        path.write_bytes(bytes(mutated))
        with pytest.raises(FixtureFormatError) as ei:
            load_fixture(path)
        return ei.value

    bad = blob.copy(); bad[0:4] = b"XdatX"[:4]
    assert reload(bad).offset == 0
    bad = blob.copy(); struct.pack_into("<I", bad, 4, 9)
    assert reload(bad).offset == 4
    bad = blob.copy(); struct.pack_into("<I", bad, 8, 0)
    assert reload(bad).offset == 8
    bad = blob.copy(); struct.pack_into("<I", bad, 12, 0)
    assert reload(bad).offset == 12
    bad = blob + b"\x00"  # trailing garbage
    assert reload(bad).offset == len(blob)


def test_manifest_cross_checks(tmp_path):
    rows = unit_rows(RngState(3), 3, 4)
    path = make_fixture(tmp_path, ["a", "b", "c"], rows)
    mpath = path.with_suffix(".json")
    good = json.loads(mpath.read_text())

    def with_manifest(m):
        mpath.write_text(json.dumps(m))
        with pytest.raises(FixtureFormatError):
            load_fixture(path)

    with_manifest({**good, "count": 2})
    with_manifest({**good, "dim": 99})
    with_manifest({**good, "names": good["names"][:2]})
    with_manifest({**good, "source": "downloaded"})
    bad = dict(good); del bad["names"]
    with_manifest(bad)
    mpath.write_text("{not json")
    with pytest.raises(FixtureFormatError):
        load_fixture(path)
    mpath.unlink()
    with pytest.raises(FixtureFormatError, match="manifest"):
        load_fixture(path)


def test_near_unit_rows_renormalized_far_rows_rejected(tmp_path):
    rows = unit_rows(RngState(4), 3, 6)
    drifted = rows * np.array([1.0, 1.0 + 5e-4, 1.0])[:, None]
    path = tmp_path / "drift.embt"
    header = struct.pack("<4sIII", b"EMBT", 1, 3, 6)
    path.write_bytes(header + drifted.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(
        {"names": ["a", "b", "c"], "dim": 6, "count": 3, "source": "initial"}))
    _, table = load_fixture(path)
    assert np.abs(np.linalg.norm(table.rows, axis=1) - 1.0).max() < 1e-12

    far = rows * np.array([1.0, 1.01, 1.0])[:, None]
    path.write_bytes(header + far.astype("<f8").tobytes())
    with pytest.raises(DataError, match="row 1 \\('b'\\)"):
        load_fixture(path)


# ---------------------------------------------------------------- supplement


def test_supplement_appends_and_dedups():
    lib = CategoryLibrary(tuple(f"class{i}" for i in range(1000)))
    out = supplement_library(lib, ["class5", "traffic cone"])
    assert len(out) == 1001
    assert out.names[:1000] == lib.names
    assert out.names[-1] == "traffic cone"
    assert out.source == "supplemented"
    # case-folded duplicate in the extras themselves
    out2 = supplement_library(lib, ["Manhole Cover", "manhole cover "])
    assert len(out2) == 1001 and out2.names[-1] == "Manhole Cover"


def test_supplement_identity_cases():
    lib = CategoryLibrary(("bus", "car"))
    assert supplement_library(lib, []) is lib
    assert supplement_library(lib, ["BUS", " car"]) is lib
    assert supplement_library(lib, ["BUS", " car"]).source == "initial"


# ---------------------------------------------------------------- similarity


def test_similarity_peaks_on_matching_row():
    table = EmbeddingTable(("a", "b", "c", "d"), np.eye(4))
    s = image_class_similarity(np.array([0.0, 1.0, 0.0, 0.0]), table, temperature=0.01)
    assert s.normalized and s.values.argmax() == 1 and s.values[1] > 0.999


def test_similarity_uniform_for_identical_rows():
    row = unit_rows(RngState(5), 1, 8)
    table = EmbeddingTable(("a", "b", "c"), np.repeat(row, 3, axis=0))
    img = unit_rows(RngState(6), 1, 8)[0]
    s = image_class_similarity(img, table)
    assert np.allclose(s.values, 1.0 / 3.0, atol=1e-12)


def test_similarity_matches_independent_oracle():
    rng = RngState(8)
    rows = unit_rows(rng, 5, 12)
    img = unit_rows(rng, 1, 12)[0]
    for temp in (0.01, 0.5, 2.0):
        got = image_class_similarity(img, EmbeddingTable(tuple("abcde"), rows), temp).values
        cos = np.array([float(np.dot(img, r)) for r in rows])
        e = np.exp(cos / temp - (cos / temp).max())
        assert np.allclose(got, e / e.sum(), atol=1e-12)
        assert abs(got.sum() - 1.0) < 1e-9


def test_similarity_permutation_equivariant():
    rng = RngState(9)
    rows = unit_rows(rng, 6, 10)
    img = unit_rows(rng, 1, 10)[0]
    names = tuple("abcdef")
    perm = RngState(10).choice(6, 6)
    base = image_class_similarity(img, EmbeddingTable(names, rows)).values
    shuffled = image_class_similarity(
        img, EmbeddingTable(tuple(names[i] for i in perm), rows[perm])).values
    assert np.allclose(shuffled, base[perm], atol=1e-15)


def test_temperature_limits():
    rng = RngState(11)
    rows = unit_rows(rng, 5, 16)
    img = rows[2]  # exact match for class 2
    hot = image_class_similarity(img, EmbeddingTable(tuple("abcde"), rows), 1e-3)
    cold = image_class_similarity(img, EmbeddingTable(tuple("abcde"), rows), 1e3)
    assert hot.values[2] > 1.0 - 1e-6
    assert np.abs(cold.values - 0.2).max() < 1e-3


def test_similarity_input_contracts():
    table = EmbeddingTable(("a", "b"), np.eye(2))
    with pytest.raises(ContractError):
        image_class_similarity(np.array([0.5, 0.5]), table)  # norm != 1
    with pytest.raises(ContractError):
        image_class_similarity(np.array([1.0, 0.0, 0.0]), table)  # wrong dim
    with pytest.raises(ConfigurationError):
        image_class_similarity(np.array([1.0, 0.0]), table, temperature=0.0)
