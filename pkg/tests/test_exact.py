import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import binary_ops, random_spd
from gamblets.errors import DimensionError, NotSPDError, RankError, StructureError
from gamblets.exact import (
    compressed_inverse_apply,
    decompose,
    gamblet_oracle,
    gamblet_solve,
    gamblet_transform,
    reconstruct,
    theta_matrix,
)
from gamblets.hierarchy import IndexTree, haar_operators
from gamblets.sparse_core import to_dense


def dense(M):
    return to_dense(M)


class TestTwoByTwo:
    def test_levels(self, two_by_two):
        _, _, h = two_by_two
        assert dense(h.B[2])[0, 0] == pytest.approx(3.0, abs=1e-14)
        assert dense(h.A[1])[0, 0] == pytest.approx(1.0, abs=1e-14)
        np.testing.assert_allclose(dense(h.psi(1)), [[2**-0.5, 2**-0.5]], atol=1e-15)

    def test_solve(self, two_by_two):
        _, _, h = two_by_two
        s = gamblet_solve(h, [1.0, 0.0])
        np.testing.assert_allclose(s.u, [2 / 3, 1 / 3], atol=1e-15)
        np.testing.assert_allclose(s.v[1], [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(s.v[2], [1 / 6, -1 / 6], atol=1e-15)

    def test_compressed_inverse(self, two_by_two):
        _, _, h = two_by_two
        np.testing.assert_allclose(compressed_inverse_apply(h, 1, [1.0, 0.0]), [0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose(compressed_inverse_apply(h, 2, [1.0, 0.0]), [2 / 3, 1 / 3], atol=1e-15)


def test_single_level():
    A = random_spd(6, seed=1)
    h = gamblet_transform(A, haar_operators(IndexTree.flat(6)))
    assert h.q == 1
    b = np.arange(6.0)
    s = gamblet_solve(h, b)
    np.testing.assert_allclose(s.u, np.linalg.solve(A, b), rtol=1e-12)
    assert list(s.v) == [1]


@pytest.fixture(scope="module")
def random16():
    A = random_spd(16, seed=7)
    ops = binary_ops(4)
    return A, ops, gamblet_transform(A, ops)


class TestInvariants:
    def test_solution(self, random16):
        A, _, h = random16
        b = np.random.default_rng(0).standard_normal(16)
        u = gamblet_solve(h, b).u
        x = np.linalg.solve(A, b)
        assert np.sqrt((u - x) @ A @ (u - x)) <= 1e-12 * np.sqrt(x @ A @ x)

    def test_stiffness_is_gamblet_gram(self, random16):
        A, _, h = random16
        for k in range(1, 5):
            P = dense(h.psi(k))
            np.testing.assert_allclose(dense(h.A[k]), P @ A @ P.T, atol=1e-11 * np.abs(A).max())

    def test_B_is_chi_gram(self, random16):
        A, _, h = random16
        for k in range(2, 5):
            X = dense(h.chi(k))
            np.testing.assert_allclose(dense(h.B[k]), X @ A @ X.T, atol=1e-11 * np.abs(A).max())

    def test_subbands_A_orthogonal(self, random16):
        A, _, h = random16
        blocks = {1: dense(h.psi(1))} | {k: dense(h.chi(k)) for k in range(2, 5)}
        scale = np.abs(A).max()
        for k in blocks:
            for l in blocks:
                if k < l:
                    assert np.abs(blocks[k] @ A @ blocks[l].T).max() <= 1e-11 * scale

    def test_measurement_duality(self, random16):
        _, ops, h = random16
        for k in range(1, 5):
            P = dense(ops.pi_to_fine(k))
            np.testing.assert_allclose(P @ dense(h.psi(k)).T, np.eye(P.shape[0]), atol=1e-12)

    def test_matches_oracle(self, random16):
        A, ops, h = random16
        for k in range(1, 4):
            Phi = dense(ops.pi_to_fine(k))
            np.testing.assert_allclose(dense(h.psi(k)), gamblet_oracle(A, Phi), atol=1e-11)

    def test_theta_inverse(self, random16):
        A, ops, h = random16
        for k in range(1, 4):
            T = theta_matrix(A, ops.pi_to_fine(k))
            np.testing.assert_allclose(dense(h.A[k]) @ T, np.eye(T.shape[0]), atol=1e-10)

    def test_restriction_composes(self, random16):
        _, _, h = random16
        b = np.random.default_rng(1).standard_normal(16)
        for k in range(1, 4):
            np.testing.assert_allclose(h.restrict(b, k), dense(h.psi(k)) @ b, atol=1e-12)

    def test_N_matrix(self, random16):
        _, ops, h = random16
        for k in range(2, 5):
            Nk = h.N_matrix(k)
            Wk = dense(ops.W[k])
            np.testing.assert_allclose(Wk @ Nk, np.eye(Wk.shape[0]), atol=1e-12)
            pb = dense(ops.pibar(k - 1))
            np.testing.assert_allclose(dense(h.R[k]), pb @ (np.eye(Nk.shape[0]) - Nk @ Wk), atol=1e-12)


class TestDecompose:
    def test_round_trip(self, random16):
        _, _, h = random16
        u = np.random.default_rng(2).standard_normal(16)
        s = decompose(h, u)
        np.testing.assert_allclose(reconstruct(s), u, atol=1e-12)

    def test_pythagoras(self, random16):
        A, _, h = random16
        u = np.random.default_rng(3).standard_normal(16)
        s = decompose(h, u)
        parts = sum(s.v[k] @ A @ s.v[k] for k in s.v)
        assert parts == pytest.approx(u @ A @ u, rel=1e-12)

    def test_wrong_length(self, random16):
        _, _, h = random16
        with pytest.raises(DimensionError):
            decompose(h, np.ones(5))


class TestCompressedInverse:
    def test_monotone_energy_error(self, random16):
        A, _, h = random16
        b = np.random.default_rng(4).standard_normal(16)
        x = np.linalg.solve(A, b)
        errs = []
        for k in range(1, 5):
            e = x - compressed_inverse_apply(h, k, b)
            errs.append(np.sqrt(e @ A @ e))
        assert all(errs[i + 1] <= errs[i] + 1e-12 for i in range(3))
        assert errs[-1] <= 1e-12 * np.sqrt(x @ A @ x)

    def test_bad_level(self, random16):
        with pytest.raises(StructureError):
            compressed_inverse_apply(random16[2], 0, np.ones(16))


class TestOracle:
    def test_formula_vs_kkt(self):
        A = random_spd(12, seed=5)
        Phi = np.random.default_rng(5).standard_normal((4, 12))
        for i in range(4):
            np.testing.assert_allclose(
                gamblet_oracle(A, Phi, i, method="formula"), gamblet_oracle(A, Phi, i, method="kkt"), atol=1e-11
            )

    def test_constraint_and_minimality(self):
        A = random_spd(10, seed=6)
        Phi = np.random.default_rng(6).standard_normal((3, 10))
        psi = gamblet_oracle(A, Phi, 1)
        np.testing.assert_allclose(Phi @ psi, [0, 1, 0], atol=1e-12)
        rng = np.random.default_rng(7)
        null = np.linalg.svd(Phi)[2][3:]
        for _ in range(10):
            z = psi + null.T @ rng.standard_normal(7)
            assert z @ A @ z >= psi @ A @ psi - 1e-12

    def test_dependent_rows(self):
        A = random_spd(5)
        Phi = np.array([[1.0, 0, 0, 0, 0], [2.0, 0, 0, 0, 0]])
        for method in ("formula", "kkt"):
            with pytest.raises((RankError, NotSPDError)):
                gamblet_oracle(A, Phi, 0, method=method)


class TestValidation:
    def test_size_mismatch(self):
        with pytest.raises(StructureError):
            gamblet_transform(np.eye(8), binary_ops(4))

    def test_nonsymmetric(self):
        A = random_spd(16)
        A[0, 1] += 1.0
        with pytest.raises(StructureError):
            gamblet_transform(A, binary_ops(4))

    def test_indefinite(self):
        A = np.diag(np.r_[-1.0, np.ones(15)])
        with pytest.raises(NotSPDError):
            gamblet_transform(A, binary_ops(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_random_spd_solve(seed, q):
    N = 2**q
    A = random_spd(N, seed=seed)
    h = gamblet_transform(sp.csr_matrix(A), binary_ops(q))
    b = np.random.default_rng(seed + 1).standard_normal(N)
    s = gamblet_solve(h, b)
    x = np.linalg.solve(A, b)
    assert np.sqrt((s.u - x) @ A @ (s.u - x)) <= 1e-10 * np.sqrt(x @ A @ x)
    parts = sum(s.v[k] @ A @ s.v[k] for k in s.v)
    assert parts == pytest.approx(x @ A @ x, rel=1e-10)


def test_fem_vs_direct(fem4):
    prob, _, h = fem4
    b = np.random.default_rng(0).standard_normal(prob.N)
    x = np.linalg.solve(prob.A.toarray(), b)
    u = gamblet_solve(h, b).u
    e = u - x
    assert np.sqrt(e @ (prob.A @ e)) <= 1e-10 * np.sqrt(x @ (prob.A @ x))


@pytest.mark.parametrize("name", ["fem3", "fem4", "fem5"])
def test_residual_within_inner_tolerance(name, request):
    prob, _, h = request.getfixturevalue(name)
    for b in (np.ones(prob.N), np.random.default_rng(9).standard_normal(prob.N)):
        u = gamblet_solve(h, b).u
        assert np.linalg.norm(prob.A @ u - b) / np.linalg.norm(b) <= 10 * h.tol(1)


def test_export(tmp_path, fem3):
    import json

    from gamblets.exact import export_hierarchy

    _, _, h = fem3
    export_hierarchy(h, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["q"] == 3
    assert (tmp_path / "A_1.mtx").exists() and (tmp_path / "R_3.mtx").exists()
