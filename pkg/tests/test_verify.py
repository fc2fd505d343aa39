import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import dense_loop_oracle
from tilefuse.kernels import FusedProblem
from tilefuse.matrix import SparseMatrixCSR, gen_identity, gen_random_sparse, random_dense
from tilefuse.verify import compare, dense_oracle


def test_oracle_identity():
    C = random_dense(6, 3, 1)
    p = FusedProblem.create(gen_identity(6), np.eye(6), C)
    np.testing.assert_array_equal(dense_oracle(p), C)


def test_oracle_scalar():
    p = FusedProblem.create(SparseMatrixCSR(1, 1, [0, 1], [0], [3.0]), np.array([[2.0]]),
                            np.array([[5.0]]))
    assert dense_oracle(p).tolist() == [[30.0]]


@pytest.mark.parametrize("sparse_b", [False, True])
def test_oracle_against_loop_order(sparse_b):
    A = gen_random_sparse(50, 0.1, 3)
    B = gen_random_sparse(50, 0.1, 4) if sparse_b else random_dense(50, 7, 5)
    p = FusedProblem.create(A, B, random_dense(B.shape[1], 4, 6))
    Bd = B.to_dense() if sparse_b else B
    np.testing.assert_allclose(dense_oracle(p), dense_loop_oracle(A.to_dense(), Bd, p.C),
                               rtol=1e-12, atol=1e-13)


def test_oracle_is_double_for_single_problem():
    A = gen_random_sparse(20, 0.2, 1)
    p = FusedProblem.create(A, random_dense(20, 3, 2), random_dense(3, 3, 3), "single")
    assert dense_oracle(p).dtype == np.float64


def test_oracle_size_guard():
    A = gen_identity(4097)
    p = FusedProblem.create(A, np.ones((4097, 1)), np.ones((1, 1)))
    with pytest.raises(ValueError):
        dense_oracle(p)


def test_compare_identical_and_zero():
    X = random_dense(4, 4, 1)
    r = compare(X, X, 1e-12)
    assert r.rel_frobenius == 0 and r.max_abs_diff == 0 and r.passed
    z = compare(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    assert z.rel_frobenius == 0 and z.passed


def test_compare_single_perturbation():
    Y = np.arange(1.0, 10.0).reshape(3, 3)
    X = Y.copy()
    X[1, 2] += 0.5
    r = compare(X, Y, 1.0)
    assert r.max_abs_diff == 0.5
    assert r.rel_frobenius == pytest.approx(0.5 / np.sqrt((np.arange(1.0, 10.0) ** 2).sum()), rel=1e-15)


def test_compare_shape_mismatch():
    with pytest.raises(ValueError):
        compare(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), rel=st.floats(0.2, 0.9))
def test_compare_symmetric_pass_fail(seed, rel):
    tol = 1e-6
    Y = random_dense(5, 5, seed)
    E = random_dense(5, 5, seed + 1)
    E *= rel * tol * np.linalg.norm(Y) / np.linalg.norm(E)
    X = Y + E
    assert compare(X, Y, tol).passed == compare(Y, X, tol).passed
    E2 = E * (1.5 / rel)
    assert compare(Y + E2, Y, tol).passed == compare(Y, Y + E2, tol).passed
