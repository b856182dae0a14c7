from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gamblets.errors import BreakdownError, ConvergenceError, DimensionError, MatrixMarketError, NotSPDError
from gamblets.sparse_core import (
    Cholesky,
    as_csr,
    cg_solve,
    dense_solve,
    is_symmetric,
    mm_read,
    mm_read_vector,
    mm_write,
    mm_write_vector,
    spd_solve,
    spmv,
    symmetry_defect,
)

from conftest import random_spd

DATA = Path(__file__).parent / "data"


def tridiag(n):
    return as_csr(sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]))


def test_as_csr_is_canonical():
    M = sp.coo_matrix(([1.0, 2.0, 3.0], ([0, 0, 1], [2, 2, 0])), shape=(2, 3))
    C = as_csr(M)
    assert C.has_canonical_format
    assert C[0, 2] == 3.0
    assert np.all(np.diff(C.indptr) >= 0)


class TestSpmv:
    def test_identity(self):
        np.testing.assert_array_equal(spmv(sp.identity(3, format="csr"), [1, 2, 3]), [1, 2, 3])

    def test_tridiag_row_sums(self):
        np.testing.assert_array_equal(spmv(tridiag(3), np.ones(3)), [1, 0, 1])

    def test_against_dense_rows(self):
        rng = np.random.default_rng(1)
        D = rng.standard_normal((5, 5)) * (rng.random((5, 5)) < 0.6)
        x = rng.standard_normal(5)
        ref = np.array([sum(D[i, j] * x[j] for j in range(5)) for i in range(5)])
        assert np.abs(spmv(as_csr(D), x) - ref).max() <= 1e-14

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            spmv(tridiag(3), np.ones(4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 10_000))
    def test_linearity(self, n, a, b, seed):
        rng = np.random.default_rng(seed)
        M = as_csr(sp.random(n, n, density=0.5, random_state=seed))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        lhs = spmv(M, a * x + b * y)
        rhs = a * spmv(M, x) + b * spmv(M, y)
        scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-12 * scale


class TestCG:
    def test_identity_one_step(self):
        res = cg_solve(sp.identity(2, format="csr"), [4.0, 5.0], tol=1e-12)
        np.testing.assert_allclose(res.x, [4, 5])
        assert res.iters == 1 and res.converged

    def test_tridiag(self):
        res = cg_solve(tridiag(3), [1.0, 0.0, 1.0], tol=1e-14)
        np.testing.assert_allclose(res.x, [1, 1, 1], atol=1e-12)
        np.testing.assert_allclose(spmv(tridiag(3), res.x), [1, 0, 1], atol=1e-12)

    def test_random_spd_matches_factorization(self):
        M = random_spd(8, seed=3)
        b = np.arange(1.0, 9.0)
        res = cg_solve(M, b, tol=1e-12)
        np.testing.assert_allclose(res.x, np.linalg.solve(M, b), atol=1e-10)

    def test_block_rhs(self):
        M = random_spd(10, seed=4)
        B = np.random.default_rng(0).standard_normal((10, 3))
        res = cg_solve(M, B, tol=1e-12)
        np.testing.assert_allclose(res.x, np.linalg.solve(M, B), atol=1e-9)

    def test_jacobi(self):
        M = np.diag([1.0, 100.0, 1e4]) + 0.1
        res = cg_solve(M, np.ones(3), tol=1e-12, precond="jacobi")
        np.testing.assert_allclose(M @ res.x, np.ones(3), atol=1e-9)

    def test_not_converged_is_flagged(self):
        res = cg_solve(tridiag(50), np.ones(50), tol=1e-14, max_iters=3)
        assert not res.converged and res.iters == 3 and res.residual > 1e-14

    def test_breakdown_on_nan(self):
        M = np.array([[1.0, 0.0], [0.0, np.nan]])
        with pytest.raises(BreakdownError) as exc:
            cg_solve(M, [1.0, 1.0])
        assert exc.value.iteration == 1

    def test_indefinite_breaks_down(self):
        with pytest.raises(BreakdownError):
            cg_solve(np.diag([1.0, -1.0]), [1.0, 1.0])

    # at tol=1e-12 the contract needs cond <= 1e4: the rounding floor of the
    # true residual is about machine epsilon times cond(M)
    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(2, 30),
        st.one_of(
            st.tuples(st.floats(0.0, 6.0), st.sampled_from([1e-6, 1e-9, 1e-11])),
            st.tuples(st.floats(0.0, 4.0), st.just(1e-12)),
        ),
        st.integers(0, 9999),
    )
    def test_residual_contract(self, n, cond_tol, seed):
        logcond, tol = cond_tol
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        M = Q @ np.diag(np.logspace(0, logcond, n)) @ Q.T
        M = 0.5 * (M + M.T)
        b = rng.standard_normal(n)
        res = cg_solve(M, b, tol=tol)
        assert res.converged
        assert np.linalg.norm(M @ res.x - b) / np.linalg.norm(b) <= 10 * tol


class TestDenseSolve:
    def test_identity(self):
        np.testing.assert_array_equal(dense_solve(np.eye(2), np.eye(2)), np.eye(2))

    def test_adjugate(self):
        X = dense_solve(np.array([[2.0, -1.0], [-1.0, 2.0]]), np.eye(2))
        np.testing.assert_allclose(X, np.array([[2, 1], [1, 2]]) / 3, atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(dense_solve(np.diag([1.0, 10.0]), np.ones((2, 1))), [[1.0], [0.1]])

    def test_pivot_reported(self):
        with pytest.raises(NotSPDError) as exc:
            dense_solve(np.diag([1.0, 2.0, -1.0]), np.ones(3))
        assert exc.value.pivot == 2

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 9999))
    def test_solve_inverts_multiply(self, n, seed):
        M = random_spd(n, seed=seed)
        X = np.random.default_rng(seed).standard_normal((n, 2))
        np.testing.assert_allclose(dense_solve(M, M @ X), X, atol=1e-10)

    def test_residual_bound(self):
        M = random_spd(40, seed=7)
        B = np.random.default_rng(2).standard_normal((40, 5))
        X = dense_solve(M, B)
        assert np.abs(M @ X - B).max() <= 1e-10 * np.abs(B).max()

    def test_lower_solve(self):
        M = random_spd(6, seed=1)
        L = np.linalg.cholesky(M)
        np.testing.assert_allclose(Cholesky(M).solve_lower(np.eye(6)), np.linalg.inv(L), atol=1e-12)


def test_spd_solve_switches_to_cg():
    M = tridiag(40) + sp.identity(40)
    b = np.ones(40)
    x = spd_solve(M, b, tol=1e-13, dense_threshold=8)
    np.testing.assert_allclose(M @ x, b, atol=1e-11)


def test_spd_solve_reports_level():
    with pytest.raises(ConvergenceError) as exc:
        spd_solve(tridiag(60), np.ones(60), tol=1e-15, dense_threshold=8, max_iters=2, level=3)
    assert exc.value.level == 3


def test_symmetry_checks():
    M = random_spd(5)
    assert is_symmetric(M) and symmetry_defect(M) <= 1e-13
    M[0, 1] += 1e-6
    assert not is_symmetric(M)


class TestMatrixMarket:
    def test_round_trip(self, tmp_path):
        M = as_csr(sp.random(6, 6, density=0.4, random_state=5)) * np.pi
        mm_write(tmp_path / "m.mtx", M)
        R = mm_read(tmp_path / "m.mtx")
        assert R.shape == M.shape
        np.testing.assert_array_equal(R.indptr, M.indptr)
        np.testing.assert_array_equal(R.indices, M.indices)
        np.testing.assert_array_equal(R.data, M.data)

    def test_fixture(self):
        M = mm_read(DATA / "fixture.mtx").toarray()
        expected = np.zeros((3, 4))
        expected[0, 0], expected[0, 3], expected[1, 1], expected[2, 0], expected[2, 2] = 1.5, -2, 32.5, -0.125, 7
        np.testing.assert_array_equal(M, expected)

    def test_array_header_rejected(self, tmp_path):
        p = tmp_path / "a.mtx"
        p.write_text("%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n")
        with pytest.raises(MatrixMarketError, match="line 1"):
            mm_read(p)

    def test_out_of_bounds(self, tmp_path):
        p = tmp_path / "b.mtx"
        p.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n")
        with pytest.raises(MatrixMarketError) as exc:
            mm_read(p)
        assert exc.value.line == 3

    def test_bad_header(self, tmp_path):
        p = tmp_path / "c.mtx"
        p.write_text("%%NotMarket matrix coordinate real general\n1 1 0\n")
        with pytest.raises(MatrixMarketError, match="line 1"):
            mm_read(p)

    def test_symmetric_storage(self, tmp_path):
        p = tmp_path / "s.mtx"
        p.write_text("%%MatrixMarket matrix coordinate real symmetric\n2 2 3\n1 1 2\n2 1 -1\n2 2 2\n")
        np.testing.assert_array_equal(mm_read(p).toarray(), [[2, -1], [-1, 2]])

    def test_vectors(self, tmp_path):
        x = np.array([1.0, 0.0, -1 / 3])
        mm_write_vector(tmp_path / "x.mtx", x)
        np.testing.assert_array_equal(mm_read_vector(tmp_path / "x.mtx"), x)
        p = tmp_path / "arr.mtx"
        p.write_text("%%MatrixMarket matrix array real general\n3 1\n1\n2\n3\n")
        np.testing.assert_array_equal(mm_read_vector(p), [1, 2, 3])
