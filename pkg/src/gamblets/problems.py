"""Test problems: bilinear FEM for -div(a grad u) on the unit square, graph Laplacians."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .sparse_core import as_csr

#: bilinear element stiffness on a square cell (independent of its size),
#: local node order (0,0), (1,0), (1,1), (0,1)
ELEMENT_STIFFNESS = np.array(
    [
        [4.0, -1.0, -2.0, -1.0],
        [-1.0, 4.0, -1.0, -2.0],
        [-2.0, -1.0, 4.0, -1.0],
        [-1.0, -2.0, -1.0, 4.0],
    ]
) / 6.0

#: bilinear element mass on a unit cell, same node order; scale by h^2
ELEMENT_MASS = np.array(
    [
        [4.0, 2.0, 1.0, 2.0],
        [2.0, 4.0, 2.0, 1.0],
        [1.0, 2.0, 4.0, 2.0],
        [2.0, 1.0, 2.0, 4.0],
    ]
) / 36.0

_CORNERS = ((0, 0), (1, 0), (1, 1), (0, 1))


@dataclass
class GridProblem:
    """Bilinear FEM discretization on a (2^q+1) x (2^q+1) cell grid.

    Interior node (i, j), 1-based, sits at (i h, j h) and has row index
    ``(j-1) n + (i-1)`` with ``n = 2^q`` (x fastest).
    """

    q: int
    coeff: np.ndarray
    A: sp.csr_matrix
    M: sp.csr_matrix
    coords: np.ndarray

    @property
    def n(self):
        return 2**self.q

    @property
    def N(self):
        return self.n**2

    @property
    def h(self):
        return 1.0 / (self.n + 1)

    def contrast(self):
        return float(self.coeff.max() / self.coeff.min())

    def center_index(self):
        """Row of the center-most node: 0-based grid index 2^(q-1) on both axes."""
        c = self.n // 2
        return c * self.n + c


def multiscale_coefficient(q, i, j, factors=7, amplitude=0.2):
    """Coefficient of cell (i, j), 0 <= i, j <= 2^q.

    Product over k = 1..factors of
    (1 + amp cos(2^k pi (i + j) / (2^q + 1))) (1 + amp sin(2^k pi (j - 3 i) / (2^q + 1))).
    """
    m = 2.0**q + 1.0
    val = 1.0
    for k in range(1, factors + 1):
        val *= 1.0 + amplitude * np.cos(2.0**k * np.pi * (i / m + j / m))
        val *= 1.0 + amplitude * np.sin(2.0**k * np.pi * (j / m - 3.0 * i / m))
    return val


def coefficient_field(q, factors=7, amplitude=0.2):
    """Array ``a[i, j]`` of all cell coefficients."""
    idx = np.arange(2**q + 1, dtype=float)
    I, J = np.meshgrid(idx, idx, indexing="ij")
    return multiscale_coefficient(q, I, J, factors=factors, amplitude=amplitude)


def _assemble(q, a, local):
    n = 2**q
    a = np.asarray(a, dtype=float)
    if a.shape != (n + 1, n + 1):
        raise ValidationError(f"coefficient field must have shape {(n + 1, n + 1)}, got {a.shape}")
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise ValidationError("coefficient must be finite and positive on every cell")
    ci, cj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    ci, cj, av = ci.ravel(), cj.ravel(), a.ravel()
    glob = []
    for dx, dy in _CORNERS:
        I, J = ci + dx, cj + dy  # 1-based interior labels run 1..n
        inside = (I >= 1) & (I <= n) & (J >= 1) & (J <= n)
        glob.append(np.where(inside, (J - 1) * n + (I - 1), -1))
    rows, cols, vals = [], [], []
    for r in range(4):
        for c in range(4):
            keep = (glob[r] >= 0) & (glob[c] >= 0)
            rows.append(glob[r][keep])
            cols.append(glob[c][keep])
            vals.append(av[keep] * local[r, c])
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    return as_csr(M)


def assemble_fem(q, a_field=None):
    """Stiffness and mass matrices of the bilinear FEM with piecewise constant ``a``.

    ``a_field`` defaults to the multiscale coefficient with 7 factors.
    """
    if q < 2:
        raise ValidationError("need q >= 2")
    if a_field is None:
        a_field = coefficient_field(q)
    n = 2**q
    A = _assemble(q, a_field, ELEMENT_STIFFNESS)
    h = 1.0 / (n + 1)
    M = _assemble(q, np.ones((n + 1, n + 1)), ELEMENT_MASS * h * h)
    g = np.arange(1, n + 1) * h
    X, Y = np.meshgrid(g, g, indexing="xy")
    coords = np.column_stack([X.ravel(), Y.ravel()])
    return GridProblem(q, np.asarray(a_field, dtype=float), A, M, coords)


def smooth_function(z1, z2):
    return np.cos(3 * z1 + z2) + np.sin(3 * z2) + np.sin(7 * z1 - 5 * z2)


def rhs_smooth(prob):
    """Nodal coefficients of the smooth forcing at every interior node."""
    return smooth_function(prob.coords[:, 0], prob.coords[:, 1])


def rhs_dirac(prob):
    """Nodal coefficients of the discrete Dirac mass: 4^q at the center node."""
    g = np.zeros(prob.N)
    g[prob.center_index()] = 4.0**prob.q
    return g


def load_vector(prob, g):
    """Right-hand side b_j = integral of (sum_i g_i Psi_i) Psi_j, i.e. M g."""
    return np.asarray(prob.M @ np.asarray(g, dtype=float)).ravel()


def graph_laplacian(edges, weights=None, reg=0.0, n=None):
    """Weighted graph Laplacian plus ``reg`` on the diagonal.

    Repeated edges accumulate their weights.
    """
    E = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(E)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(E),):
        raise ValidationError("need one weight per edge")
    if np.any(E[:, 0] == E[:, 1]):
        bad = int(np.flatnonzero(E[:, 0] == E[:, 1])[0])
        raise ValidationError(f"edge {bad} is a self-loop")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValidationError("edge weights must be positive")
    if reg < 0:
        raise ValidationError("reg must be nonnegative")
    if np.any(E < 0):
        raise ValidationError("negative node index")
    if n is None:
        n = int(E.max()) + 1 if len(E) else 0
    W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([E[:, 0], E[:, 1]]), np.concatenate([E[:, 1], E[:, 0]]))), shape=(n, n))
    W = as_csr(W)
    deg = np.asarray(W.sum(axis=1)).ravel()
    return as_csr(sp.diags(deg + reg) - W)


def laplacian_1d(n):
    """tridiag(-1, 2, -1) of size n (Dirichlet second difference)."""
    return as_csr(sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]))


def read_edge_list(path):
    """Edges ``i j [w]`` one per line; '#' starts a comment."""
    edges, weights = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].split()
            if not line:
                continue
            if len(line) not in (2, 3):
                raise ValidationError(f"line {lineno}: expected 'i j [weight]'")
            edges.append((int(line[0]), int(line[1])))
            weights.append(float(line[2]) if len(line) == 3 else 1.0)
    return np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(weights)
