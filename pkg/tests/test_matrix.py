from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilefuse.matrix import (MatrixMarketError, SparseMatrixCSR, gen_arrow, gen_banded,
                             gen_dense, gen_identity, gen_random_sparse, load_matrix_market,
                             write_matrix_market)


def _write(tmp_path, text, name="m.mtx"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_identity_file(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n2 2 1.0\n")
    A = load_matrix_market(p)
    assert A.row_ptr.tolist() == [0, 1, 2]
    assert A.col_idx.tolist() == [0, 1]
    assert A.values.tolist() == [1.0, 1.0]


def test_symmetric_expansion(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n"
                         "% a comment\n2 2 1\n2 1 3\n")
    A = load_matrix_market(p)
    assert A.to_dense().tolist() == [[0, 3], [3, 0]]


def test_duplicates_summed(tmp_path):
    entries = [(1, 1, 2.0), (2, 3, 1.5), (1, 1, 3.0), (3, 2, -1.0), (2, 3, 0.25)]
    body = "".join(f"{r} {c} {v}\n" for r, c, v in entries)
    p = _write(tmp_path, f"%%MatrixMarket matrix coordinate real general\n3 3 {len(entries)}\n{body}")
    A = load_matrix_market(p)

    acc = defaultdict(float)
    for r, c, v in entries:
        acc[(r - 1, c - 1)] += v
    keys = sorted(acc)
    rows = [0] * 4
    for r, _ in keys:
        rows[r + 1] += 1
    assert A.row_ptr.tolist() == np.cumsum(rows).tolist()
    assert A.col_idx.tolist() == [c for _, c in keys]
    assert A.values.tolist() == [acc[k] for k in keys]
    assert A.values[0] == 5.0


def test_pattern_gets_unit_values(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate pattern general\n2 3 2\n1 3\n2 1\n")
    A = load_matrix_market(p)
    assert A.shape == (2, 3)
    assert A.values.tolist() == [1.0, 1.0]


@pytest.mark.parametrize("text", [
    "%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n",
    "not a header\n1 1 1\n1 1 1\n",
    "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n",
    "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n",
    "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n",
    "%%MatrixMarket matrix coordinate real general\n2 2 1\n1 x 1.0\n",
])
def test_malformed_rejected(tmp_path, text):
    with pytest.raises(MatrixMarketError):
        load_matrix_market(_write(tmp_path, text))


def test_checked_constructor():
    with pytest.raises(ValueError):
        SparseMatrixCSR(2, 2, [0, 2, 1], [0, 1], [1.0, 1.0])
    with pytest.raises(ValueError):
        SparseMatrixCSR(1, 2, [0, 2], [1, 0], [1.0, 1.0])
    with pytest.raises(ValueError):
        SparseMatrixCSR(1, 2, [0, 1], [2], [1.0])
    with pytest.raises(ValueError):
        SparseMatrixCSR(1, 2, [1, 1], [], [])
    A = SparseMatrixCSR(2, 3, [0, 0, 2], [0, 2], [1.0, 2.0])
    assert A.nnz == 2 and A.row_nnz().tolist() == [0, 2]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), m=st.integers(1, 30), density=st.floats(0.01, 1.0), seed=st.integers(0, 10**6))
def test_matrix_market_round_trip(tmp_path_factory, n, m, density, seed):
    rng = np.random.default_rng(seed)
    dense = np.where(rng.random((n, m)) < density, rng.normal(size=(n, m)), 0.0)
    A = SparseMatrixCSR.from_dense(dense)
    p = tmp_path_factory.mktemp("rt") / "a.mtx"
    write_matrix_market(A, p)
    assert load_matrix_market(p) == A


def test_random_generator():
    A = gen_random_sparse(4, 1.0, 123)
    assert A.nnz == 16
    B = gen_random_sparse(1000, 0.01, 7)
    direct = int(np.count_nonzero(B.to_dense()))
    assert B.nnz == direct
    assert 8000 <= B.nnz <= 12000
    assert B == gen_random_sparse(1000, 0.01, 7)
    assert np.all(B.row_nnz() >= 1)
    assert B.values.min() >= 0.1 and B.values.max() <= 1.0


def test_random_generator_rejects_bad_args():
    with pytest.raises(ValueError):
        gen_random_sparse(0, 0.1, 1)
    with pytest.raises(ValueError):
        gen_random_sparse(5, 0.0, 1)


def test_banded_generator():
    assert gen_banded(4, 0).nnz == 4
    assert gen_banded(5, 1).nnz == 3 * 5 - 2
    assert gen_banded(4, 3).nnz == 16
    dense = gen_banded(9, 2).to_dense()
    i, j = np.indices(dense.shape)
    assert np.array_equal(dense != 0, np.abs(i - j) <= 2)
    with pytest.raises(ValueError):
        gen_banded(4, 4)


def test_other_generators():
    assert gen_identity(5).to_dense().tolist() == np.eye(5).tolist()
    assert gen_dense(3).nnz == 9
    arrow = gen_arrow(5, 1).to_dense() != 0
    assert arrow[0].all() and arrow[:, 0].all() and arrow.sum() == 13
