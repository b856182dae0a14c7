import numpy as np
import pytest
import scipy.sparse as sp

from gamblets.errors import ValidationError
from gamblets.problems import (
    ELEMENT_STIFFNESS,
    assemble_fem,
    coefficient_field,
    graph_laplacian,
    laplacian_1d,
    load_vector,
    multiscale_coefficient,
    rhs_dirac,
    rhs_smooth,
    smooth_function,
)
from gamblets.sparse_core import Cholesky, is_symmetric


def _coefficient_loop(q, i, j):
    m = 2**q + 1
    out = 1.0
    for k in range(1, 8):
        out *= (1 + 0.2 * np.cos(2**k * np.pi * (i + j) / m)) * (1 + 0.2 * np.sin(2**k * np.pi * (j - 3 * i) / m))
    return out


def _stiffness_by_quadrature():
    # gradients of the bilinear shape functions on the unit square,
    # integrated with 3x3 Gauss points
    pts, wts = np.polynomial.legendre.leggauss(3)
    pts, wts = (pts + 1) / 2, wts / 2
    K = np.zeros((4, 4))
    for x, wx in zip(pts, wts):
        for y, wy in zip(pts, wts):
            g = np.array([[-(1 - y), -(1 - x)], [1 - y, -x], [y, x], [-y, 1 - x]])
            K += wx * wy * g @ g.T
    return K


class TestCoefficient:
    def test_origin(self):
        assert multiscale_coefficient(5, 0, 0) == pytest.approx(1.2**7, rel=1e-14)
        assert 1.2**7 == pytest.approx(3.5831808)

    def test_zero_amplitude(self):
        np.testing.assert_array_equal(coefficient_field(3, amplitude=0.0), 1.0)

    @pytest.mark.parametrize("q,i,j", [(3, 1, 2), (4, 7, 0), (5, 31, 17), (6, 64, 64)])
    def test_second_evaluation(self, q, i, j):
        assert multiscale_coefficient(q, i, j) == pytest.approx(_coefficient_loop(q, i, j), rel=1e-13)

    def test_positive(self):
        a = coefficient_field(6)
        assert a.min() >= 0.64**7 * 0.999


class TestAssembly:
    def test_element_matrix(self):
        np.testing.assert_allclose(ELEMENT_STIFFNESS, _stiffness_by_quadrature(), atol=1e-14)

    def test_unit_stencil(self):
        prob = assemble_fem(3, np.ones((9, 9)))
        n = 8
        c = 3 * n + 3
        row = prob.A[c].toarray().ravel()
        assert row[c] == pytest.approx(8 / 3)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx or dy:
                    assert row[c + dy * n + dx] == pytest.approx(-1 / 3)
        assert np.count_nonzero(row) == 9

    def test_small_case_spd(self):
        prob = assemble_fem(2)
        assert prob.A.shape == (16, 16)
        Cholesky(prob.A.toarray())

    def test_scaling(self):
        a = coefficient_field(3)
        A1 = assemble_fem(3, a).A
        A2 = assemble_fem(3, 2 * a).A
        assert (A2 - 2 * A1).count_nonzero() == 0

    def test_symmetric_nine_point(self):
        prob = assemble_fem(4)
        assert is_symmetric(prob.A, tol=1e-14)
        assert np.diff(prob.A.indptr).max() == 9

    def test_nonpositive_coefficient(self):
        a = np.ones((5, 5))
        a[2, 2] = 0.0
        with pytest.raises(ValidationError):
            assemble_fem(2, a)

    def test_contrast_bounds(self):
        q = 4
        prob = assemble_fem(q)
        L1 = assemble_fem(q, np.ones((17, 17))).A
        lo, hi = prob.coeff.min(), prob.coeff.max()
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal(prob.N)
            qa, ql = x @ prob.A @ x, x @ L1 @ x
            assert lo * ql <= qa * (1 + 1e-12) and qa <= hi * ql * (1 + 1e-12)
            assert qa > 0

    def test_mass_matrix_total(self):
        # sum of all load weights of the constant 1 over interior nodes
        prob = assemble_fem(3)
        assert prob.M.sum() > 0 and is_symmetric(prob.M)


class TestRhs:
    def test_origin_value(self):
        assert smooth_function(0.0, 0.0) == 1.0

    def test_smooth(self):
        prob = assemble_fem(3)
        g = rhs_smooth(prob)
        assert g.shape == (64,)
        z = prob.coords
        ref = np.cos(3 * z[:, 0] + z[:, 1]) + np.sin(3 * z[:, 1]) + np.sin(7 * z[:, 0] - 5 * z[:, 1])
        np.testing.assert_array_equal(g, ref)

    def test_dirac(self):
        prob = assemble_fem(3)
        g = rhs_dirac(prob)
        assert np.count_nonzero(g) == 1
        assert g[4 * 8 + 4] == 64.0
        assert np.allclose(prob.coords[prob.center_index()], [5 / 9, 5 / 9])

    def test_load_vector(self):
        prob = assemble_fem(3)
        g = rhs_smooth(prob)
        np.testing.assert_allclose(load_vector(prob, g), prob.M @ g)


class TestGraph:
    def test_triangle(self):
        L = graph_laplacian([(0, 1), (1, 2), (2, 0)])
        np.testing.assert_array_equal(L.toarray(), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    def test_row_sums(self):
        rng = np.random.default_rng(1)
        E = np.array([(i, j) for i in range(10) for j in range(i + 1, 10) if rng.random() < 0.4])
        L = graph_laplacian(E, rng.uniform(0.5, 2, len(E)), reg=0.3, n=10)
        np.testing.assert_allclose(np.asarray(L.sum(axis=1)).ravel(), 0.3)

    def test_regularized_spd(self):
        rng = np.random.default_rng(2)
        E = np.array([(i, (i + 1) % 32) for i in range(32)] + [(i, (i + 5) % 32) for i in range(32)])
        L = graph_laplacian(E, reg=1e-3)
        assert np.linalg.eigvalsh(L.toarray())[0] > 0

    def test_self_loop(self):
        with pytest.raises(ValidationError, match="self-loop"):
            graph_laplacian([(0, 1), (2, 2)])

    def test_laplacian_1d(self):
        np.testing.assert_array_equal(laplacian_1d(3).toarray(), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
