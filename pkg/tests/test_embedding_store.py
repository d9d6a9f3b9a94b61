import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phenobench.embedding_store import (EmbeddingRecord, EmbeddingTable, load_embeddings,
                                        save_embeddings, select, where)
from phenobench.errors import SchemaError, ValidationError

HEADER = "well_id,experiment_id,plate_id,perturbation_id,well_type,v0,v1,v2,v3\n"
ROWS = [
    "A01,E1,P1,EMPTY,negative_control,0.5,-1,2.25,0\n",
    "A02,E1,P1,TP53,perturbation,1,2,3,4\n",
    "B01,E1,P2,MDM2,perturbation,-0.125,0.1,1e-3,7\n",
]


@pytest.fixture
def fixture_file(tmp_path):
    p = tmp_path / "emb.csv"
    p.write_text(HEADER + "".join(ROWS), encoding="utf-8")
    return p


def test_load_three_rows_field_by_field(fixture_file):
    t = load_embeddings(fixture_file)
    assert t.dim == 4 and len(t) == 3
    r0, r1, r2 = t.records
    assert (r0.well_id, r0.experiment_id, r0.plate_id, r0.perturbation_id, r0.well_type) == \
        ("A01", "E1", "P1", "EMPTY", "negative_control")
    assert r0.vector.tolist() == [0.5, -1.0, 2.25, 0.0]
    assert r1.perturbation_id == "TP53" and r1.vector.tolist() == [1, 2, 3, 4]
    assert r2.plate_id == "P2" and r2.vector.tolist() == [-0.125, 0.1, 0.001, 7.0]


def test_explicit_dim_must_match_header(fixture_file):
    assert load_embeddings(fixture_file, dim=4).dim == 4
    with pytest.raises(SchemaError):
        load_embeddings(fixture_file, dim=5)


def test_ragged_row_names_row_2(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(HEADER + ROWS[0] + "A02,E1,P1,TP53,perturbation,1,2,3\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="row 2"):
        load_embeddings(p)


@pytest.mark.parametrize("bad", ["nan", "inf", "-inf"])
def test_non_finite_rejected(tmp_path, bad):
    p = tmp_path / "bad.csv"
    p.write_text(HEADER + f"A02,E1,P1,TP53,perturbation,1,{bad},3,4\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_embeddings(p)


def test_duplicate_key_rejected(tmp_path):
    p = tmp_path / "dup.csv"
    p.write_text(HEADER + ROWS[1] + ROWS[1].replace("TP53", "KRAS"), encoding="utf-8")
    with pytest.raises(ValidationError, match="duplicates"):
        load_embeddings(p)


def test_control_label_enforced(tmp_path):
    p = tmp_path / "ctrl.csv"
    p.write_text(HEADER + "A01,E1,P1,TP53,negative_control,0,0,0,0\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_embeddings(p)
    t = load_embeddings(p, control_label="TP53")
    assert t.control_label == "TP53" and len(t) == 1


def test_empty_file_with_header(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("well_id,experiment_id,plate_id,perturbation_id,well_type,"
                 + ",".join(f"v{j}" for j in range(128)) + "\n", encoding="utf-8")
    t = load_embeddings(p)
    assert t.dim == 128 and len(t) == 0


def test_round_trip_fixture(fixture_file, tmp_path):
    t = load_embeddings(fixture_file)
    out = tmp_path / "out.csv"
    save_embeddings(t, out)
    assert load_embeddings(out) == t


def test_zero_records_writes_header_only(tmp_path):
    out = tmp_path / "z.csv"
    save_embeddings(EmbeddingTable(3), out)
    assert out.read_text(encoding="utf-8") == \
        "well_id,experiment_id,plate_id,perturbation_id,well_type,v0,v1,v2\n"


def test_point_one_survives_round_trip(tmp_path):
    t = EmbeddingTable(1, [EmbeddingRecord("w", "e", "p", "G", "perturbation", np.array([0.1]))])
    out = tmp_path / "x.csv"
    save_embeddings(t, out)
    assert "0.10000000000000001" in out.read_text()
    back = load_embeddings(out).vectors[0, 0]
    assert back.tobytes() == np.float64(0.1).tobytes()


def test_unwritable_path_raises(fixture_file, tmp_path):
    t = load_embeddings(fixture_file)
    with pytest.raises(OSError):
        save_embeddings(t, tmp_path / "missing_dir" / "x.csv")


def test_select(fixture_file):
    t = load_embeddings(fixture_file)
    ctrl = select(t, where(well_type="negative_control"))
    assert len(ctrl) == 1 and ctrl.records[0].well_id == "A01"
    assert select(t, lambda r: True) == t
    none = select(t, lambda r: False)
    assert len(none) == 0 and none.dim == 4
    assert len(t) == 3  # original untouched


def test_tables_are_immutable(fixture_file):
    t = load_embeddings(fixture_file)
    with pytest.raises(AttributeError):
        t.dim = 5
    with pytest.raises(ValueError):
        t.vectors[0, 0] = 1.0


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def tables(draw):
    dim = draw(st.integers(1, 4))
    n = draw(st.integers(0, 6))
    recs = []
    for i in range(n):
        ctrl = draw(st.booleans())
        vec = np.array(draw(st.lists(finite, min_size=dim, max_size=dim)))
        recs.append(EmbeddingRecord(f"W{i}", draw(st.sampled_from(["E1", "E2"])), "P1",
                                    "EMPTY" if ctrl else draw(st.sampled_from(["A", "B,C", "D\"x"])),
                                    "negative_control" if ctrl else "perturbation", vec))
    return EmbeddingTable(dim, recs)


@settings(max_examples=60, deadline=None)
@given(tables())
def test_round_trip_is_bit_exact(tmp_path_factory, t):
    out = tmp_path_factory.mktemp("rt") / "t.csv"
    save_embeddings(t, out)
    assert load_embeddings(out, dim=t.dim) == t


@settings(max_examples=60, deadline=None)
@given(tables(), st.sampled_from(["E1", "E2"]), st.booleans())
def test_select_composes(t, exp, ctrl):
    p = where(experiment_id=exp)
    q = (lambda r: r.is_control) if ctrl else (lambda r: not r.is_control)
    assert select(select(t, p), q) == select(t, lambda r: p(r) and q(r))
