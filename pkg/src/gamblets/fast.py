"""Localized (fast) gamblet transform.

Level-k graph distances come from the sparsity pattern of A aggregated to
level-k cells. Each level replaces the global solve for D^(k,k-1) by one
small solve per coarse index over a graph ball, and truncates the coarse
stiffness matrix to pairs of cells within twice the radius.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .errors import ConvergenceError, NotSPDError, StructureError
from .exact import GambletHierarchy, _check_inputs, _solve_levels, mul, sub
from .sparse_core import DENSE_THRESHOLD, Cholesky, as_csr, cg_solve, symmetrize

#: maximum number of dense distance entries materialized per BFS batch
_BATCH_ENTRIES = 1 << 22


class LevelGraphDistance:
    """Graph distance on level-k coordinates induced by the pattern of A.

    Two level-k cells are adjacent when some pair of their descendant
    unknowns is coupled by a nonzero of A.
    """

    def __init__(self, A, tree, k):
        self.level = k
        anc = tree.ancestor(k)
        n = tree.size(k)
        N = anc.size
        P = sp.csr_matrix((np.ones(N), (np.arange(N), anc)), shape=(N, n))
        pat = as_csr(A)
        pat.data = np.ones_like(pat.data)
        C = as_csr(P.T @ pat @ P)
        C.data = np.ones_like(C.data)
        self.connectivity = C
        adj = C.tolil()
        adj.setdiag(0)
        adj = as_csr(adj)
        adj.eliminate_zeros()
        self.adjacency = adj
        self.n = n
        self._within = {}

    def distances_from(self, i, limit=np.inf):
        """Distances from ``i`` to every cell; ``inf`` beyond ``limit`` or across components."""
        return dijkstra(self.adjacency, directed=False, unweighted=True, indices=[i], limit=limit)[0]

    def distance(self, i, j):
        return self.distances_from(i)[j]

    def ball(self, i, rho):
        """Sorted cells within distance ``rho`` of ``i``."""
        W = self.within(rho)
        return W.indices[W.indptr[i]:W.indptr[i + 1]]

    def within(self, rho):
        """0/1 CSR matrix of pairs (i, j) with d(i, j) <= rho."""
        rho = float(rho)
        if rho not in self._within:
            self._within[rho] = self._compute_within(rho)
        return self._within[rho]

    def _compute_within(self, rho):
        n = self.n
        batch = max(1, _BATCH_ENTRIES // max(n, 1))
        parts = []
        for s in range(0, n, batch):
            idx = np.arange(s, min(n, s + batch))
            D = dijkstra(self.adjacency, directed=False, unweighted=True, indices=idx, limit=rho + 0.5)
            parts.append(sp.csr_matrix(D <= rho))
        M = as_csr(sp.vstack(parts))
        M.data = np.ones_like(M.data)
        return M

    def all_pairs(self):
        return dijkstra(self.adjacency, directed=False, unweighted=True)

    def diameter(self):
        """Largest finite distance between two cells."""
        D = self.all_pairs()
        return int(D[np.isfinite(D)].max()) if D.size else 0


def ball_growth_exponent(dist, samples=16):
    """Fitted d in |B(i, r)| ~ r^d over a few evenly spaced centers.

    Used as the dimension of a graph without geometry. Radii run from 1 up
    to half the smallest eccentricity among the centers, so balls do not
    saturate; returns 1.0 when the graph is too small to fit.
    """
    centers = np.unique(np.linspace(0, dist.n - 1, min(dist.n, samples)).astype(int))
    D = dijkstra(dist.adjacency, directed=False, unweighted=True, indices=centers)
    D = np.where(np.isfinite(D), D, -1)
    R = int(D.max(axis=1).min()) // 2
    if R < 2:
        return 1.0
    r = np.arange(1, R + 1)
    counts = np.array([np.mean(np.sum((D >= 0) & (D <= x), axis=1)) for x in r])
    return float(max(np.polyfit(np.log(r), np.log(counts), 1)[0], 1.0))


@dataclass
class LocalizationSchedule:
    """Radii ``rho[k]`` (k = 1..q) and the inner accuracies of a localized solve."""

    H: float
    epsilon: float
    C_a: float
    q: int
    rho: dict
    d: float = 2.0
    subband_tol: dict = field(default_factory=dict)
    coarse_tol: float = 0.0
    ball_tol: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "H": self.H,
            "epsilon": self.epsilon,
            "C_a": self.C_a,
            "q": self.q,
            "d": self.d,
            "rho": {str(k): int(v) for k, v in self.rho.items()},
            "subband_tol": {str(k): v for k, v in self.subband_tol.items()},
            "coarse_tol": self.coarse_tol,
            "ball_tol": {str(k): v for k, v in self.ball_tol.items()},
        }


def radius_formula(H, k, epsilon, C_a):
    """Unrounded radius C_a((1 + 1/ln(1/H)) ln(1/H^k) + ln(1/epsilon))."""
    L = math.log(1.0 / H)
    return C_a * ((1.0 + 1.0 / L) * k * L + math.log(1.0 / epsilon))


def _tolerances(sched):
    q, eps, H, d = sched.q, sched.epsilon, sched.H, sched.d
    sched.subband_tol = {k: eps / (2.0 * k * k) for k in range(2, q + 1)}
    sched.coarse_tol = eps / 2.0
    sched.ball_tol = {k: H ** (3 - k + k * d / 2.0) * eps / (sched.C_a * k * k) for k in range(2, q + 1)}
    return sched


def default_schedule(H, q, epsilon, C_a, d=2.0):
    """Radii rho_k = ceil(radius_formula) for k = 1..q, plus inner tolerances."""
    if not 0 < H < 1:
        raise ValueError("H must lie in (0, 1)")
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if C_a <= 0:
        raise ValueError("C_a must be positive")
    rho = {k: int(math.ceil(radius_formula(H, k, epsilon, C_a) - 1e-12)) for k in range(1, q + 1)}
    return _tolerances(LocalizationSchedule(H, epsilon, C_a, q, rho, d))


def uniform_schedule(q, rho, epsilon=1e-8, H=0.5, C_a=1.0, d=2.0):
    """Same radius at every level (used for radius sweeps)."""
    return _tolerances(LocalizationSchedule(H, epsilon, C_a, q, {k: int(rho) for k in range(1, q + 1)}, d))


def full_radius_schedule(q, N, epsilon=1e-12, **kw):
    """Radii large enough that localization is inactive."""
    return uniform_schedule(q, N + 1, epsilon=epsilon, **kw)


def _submatrix(M, idx, dense=True):
    if sp.issparse(M):
        sub = M[idx][:, idx]
        return sub.toarray() if dense else sub
    return M[np.ix_(idx, idx)]


def localized_inverse(B_loc, rhs_block, dist, rho, tol=1e-12, W_parent=None, dense_threshold=DENSE_THRESHOLD):
    """Column-wise ball solves: column i of the result solves B[J_i, J_i] y = rhs[J_i, i].

    ``J_i`` holds the rows of B whose parent cell (``W_parent``, a level
    k-1 label per row) lies within ``rho`` of cell i in ``dist``. Entries
    outside ``J_i`` are zero. Ball systems up to ``dense_threshold`` rows
    are factorized; larger ones use CG to relative residual ``tol``.
    """
    nJ, nI = rhs_block.shape
    if W_parent is None:
        W_parent = np.arange(nJ)
    W_parent = np.asarray(W_parent)
    if B_loc.shape != (nJ, nJ) or dist.n != nI:
        raise StructureError("localized inverse operands have inconsistent shapes")
    order = np.argsort(W_parent, kind="stable")
    starts = np.searchsorted(W_parent[order], np.arange(nI + 1))
    Z = sp.csc_matrix(rhs_block) if sp.issparse(rhs_block) else None
    Bm = as_csr(B_loc) if sp.issparse(B_loc) else np.asarray(B_loc)
    rows, cols, vals = [], [], []
    for i in range(nI):
        cells = dist.ball(i, rho)
        J = np.sort(np.concatenate([order[starts[c]:starts[c + 1]] for c in cells])) if len(cells) else np.zeros(0, int)
        if J.size == 0:
            continue
        if Z is not None:
            zc = Z[:, [i]].toarray().ravel()[J]
        else:
            zc = np.asarray(rhs_block)[J, i]
        if not np.any(zc):
            continue
        small = J.size <= dense_threshold
        X = _submatrix(Bm, J, dense=small)
        if small:
            try:
                y = Cholesky(X).solve(zc)
            except NotSPDError as exc:
                raise NotSPDError(exc.pivot, f"ball system for index {i} is not positive definite") from exc
        else:
            res = cg_solve(X, zc, tol=tol)
            if not res.converged:
                raise ConvergenceError(f"ball solve for index {i} did not converge", residual=res.residual, index=i)
            y = res.x
        rows.append(J)
        cols.append(np.full(J.size, i))
        vals.append(y)
    if not rows:
        return sp.csr_matrix((nJ, nI))
    return as_csr(sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nJ, nI)))


def truncate(M, dist, rho, parent=None):
    """Zero entries (a, b) with d(parent[a], parent[b]) > 2 rho, then symmetrize.

    ``parent`` maps the rows of M to cells of ``dist``; identity if None.
    """
    M = as_csr(M)
    n = M.shape[0]
    parent = np.arange(n) if parent is None else np.asarray(parent)
    if parent.shape != (n,) or M.shape[1] != n:
        raise StructureError("truncate needs a square matrix with one parent per row")
    near = dist.within(2 * rho)
    coo = M.tocoo()
    pr, pc = parent[coo.row], parent[coo.col]
    # membership test of (pr, pc) in the sorted CSR pattern of ``near``
    keys = pr.astype(np.int64) * dist.n + pc
    near_coo = near.tocoo()
    near_keys = near_coo.row.astype(np.int64) * dist.n + near_coo.col
    near_keys.sort()
    pos = np.searchsorted(near_keys, keys)
    pos = np.minimum(pos, max(near_keys.size - 1, 0))
    keep = (near_keys[pos] == keys) if near_keys.size else np.zeros(keys.size, bool)
    T = sp.coo_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=M.shape)
    return symmetrize(as_csr(T))


def fast_gamblet_transform(A, ops, sched, distances=None, dense_threshold=DENSE_THRESHOLD):
    """Localized hierarchy: radius rho_{k-1} for the level-k ball solves, truncation at rho_{k-2}."""
    A = as_csr(A)
    _check_inputs(A, ops)
    q = ops.q
    if sched.q != q:
        raise StructureError(f"schedule has {sched.q} levels, operators have {q}")
    tree = ops.tree
    dists = {} if distances is None else distances

    def dist(k):
        if k not in dists:
            dists[k] = LevelGraphDistance(A, tree, k)
        return dists[k]

    h = GambletHierarchy(ops, {q: A}, {}, {}, {}, localized=True, dense_threshold=dense_threshold)
    h.solve_tol = {1: sched.coarse_tol, **sched.subband_tol}
    for k in range(q, 1, -1):
        Ak = h.A[k]
        Wk = ops.W[k]
        pb = ops.pibar(k - 1)
        h.B[k] = symmetrize(mul(Wk, mul(Ak, Wk.T)))
        rhs = mul(Wk, mul(Ak, pb.T))
        h.D[k] = localized_inverse(
            h.B[k], rhs, dist(k - 1), sched.rho[k - 1], tol=sched.ball_tol[k], W_parent=ops.W_parent[k],
            dense_threshold=dense_threshold,
        )
        h.R[k] = sub(pb, mul(h.D[k].T, Wk))
        Ac = mul(h.R[k], mul(Ak, h.R[k].T))
        if k >= 3:
            Ac = truncate(Ac, dist(k - 2), sched.rho[k - 2], parent=tree.coord_parent(k - 1))
        h.A[k - 1] = symmetrize(Ac)
    h.info = {"mode": "fast", "schedule": sched.to_dict(), "nnz": h.level_nnz(), "total_nnz": h.total_nnz()}
    return h


def fast_gamblet_solve(A, ops, g, sched, distances=None):
    """Localized transform followed by the subband solve of ``g``.

    Returns ``(solution, hierarchy)``.
    """
    h = fast_gamblet_transform(A, ops, sched, distances=distances)
    g = np.asarray(g, dtype=np.float64).ravel()
    if g.shape[0] != h.N:
        raise StructureError(f"right-hand side has length {g.shape[0]}, expected {h.N}")
    return _solve_levels(h, g), h


def calibrate_C_a(A, ops, rhs_list, epsilon, H=0.5, start=2.0**-6, max_doublings=24, d=2.0):
    """Smallest C_a = start * 2^m whose schedule meets |u - u^loc|_A <= epsilon |u|_A for every rhs.

    Exact solutions come from the exact transform. Returns
    ``(C_a, history)`` with one ``(C_a, worst relative error)`` pair per trial.
    """
    from .exact import gamblet_solve, gamblet_transform

    h = gamblet_transform(A, ops)
    refs = [gamblet_solve(h, g).u for g in rhs_list]
    dists = {}
    history = []
    C_a = start
    for _ in range(max_doublings + 1):
        sched = default_schedule(H, ops.q, epsilon, C_a, d=d)
        hl = fast_gamblet_transform(A, ops, sched, distances=dists)
        worst = 0.0
        for g, u in zip(rhs_list, refs):
            e = _solve_levels(hl, np.asarray(g, dtype=float)).u - u
            rel = math.sqrt(max(e @ (A @ e), 0.0)) / math.sqrt(u @ (A @ u))
            worst = max(worst, rel)
        history.append((C_a, worst))
        if worst <= epsilon:
            return C_a, history
        C_a *= 2.0
    raise ConvergenceError(f"no C_a up to {C_a / 2:g} met epsilon={epsilon:g}")
