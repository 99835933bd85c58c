import numpy as np
import pytest

from qcrf.crf import DomainError, FeatureTable, Sequence
from qcrf.instances import random_table
from qcrf.io import fmt, read_dataset, read_feature_table, write_dataset, write_feature_table


def test_fmt_seventeen_digits():
    assert fmt(0.1) == "0.10000000000000001"
    assert float(fmt(np.pi)) == np.pi


def test_dataset_roundtrip(tmp_path):
    seqs = [Sequence(("the", "dog"), ("DET", "NOUN")), Sequence(("runs",), ("VERB",))]
    path = tmp_path / "data.tsv"
    write_dataset(path, seqs)
    assert path.read_text() == "the\tDET\ndog\tNOUN\n\nruns\tVERB\n"
    back = read_dataset(path)
    assert [s.observations for s in back] == [("the", "dog"), ("runs",)]
    assert [s.labels for s in back] == [("DET", "NOUN"), ("VERB",)]


def test_dataset_bad_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("the DET\n")
    with pytest.raises(DomainError, match=":1:"):
        read_dataset(path)


@pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 2), (5, 2, 3)])
def test_feature_table_roundtrip(tmp_path, shape):
    K, n, Q = shape
    t = random_table(np.random.default_rng(K * n * Q), n, K, Q)
    path = tmp_path / "t.txt"
    write_feature_table(path, t)
    lines = path.read_text().splitlines()
    assert lines[0] == f"{K} {n} {Q}"
    assert len(lines) == 1 + K * n
    np.testing.assert_array_equal(read_feature_table(path).values, t.values)


def test_feature_table_row_order(tmp_path):
    values = np.array([[[1, -1], [-1, -1]], [[-1, 1], [1, 1]]])
    path = tmp_path / "t.txt"
    write_feature_table(path, FeatureTable(values))
    assert path.read_text() == "2 2 2\n1 -1\n-1 -1\n-1 1\n1 1\n"


@pytest.mark.parametrize("text,match", [
    ("2 2\n", "header"),
    ("1 1 2\n1 -1\n1 1\n", "expected 1"),
    ("1 1 2\n1 -1 1\n", "2 signs"),
])
def test_feature_table_errors(tmp_path, text, match):
    path = tmp_path / "t.txt"
    path.write_text(text)
    with pytest.raises(DomainError, match=match):
        read_feature_table(path)


def test_feature_table_rejects_zero(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("1 1 2\n1 0\n")
    with pytest.raises(DomainError):
        read_feature_table(path)
