"""Exact gamblet transform: hierarchy construction, subband solves, oracles."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, ConvergenceError, DimensionError, NotSPDError, RankError, StructureError
from .io_utils import dump_json
from .sparse_core import (
    DENSE_CAP,
    DENSE_THRESHOLD,
    Cholesky,
    as_csr,
    cg_solve,
    compact,
    is_symmetric,
    mm_write,
    nnz,
    symmetrize,
    to_dense,
)


def mul(X, Y):
    """Product of two operands that may each be sparse or dense.

    Sparse-by-sparse products stay sparse unless they fill in; anything
    touching a dense operand comes back dense.
    """
    if sp.issparse(X) and sp.issparse(Y):
        return compact(X @ Y)
    if sp.issparse(X):
        return np.asarray(X @ Y)
    if sp.issparse(Y):
        return np.asarray((Y.T @ X.T).T)
    return X @ Y


def sub(X, Y):
    """X - Y for mixed sparse/dense operands, compacted."""
    if sp.issparse(X) and sp.issparse(Y):
        return compact(X - Y)
    return to_dense(X) - to_dense(Y)


class LevelSolver:
    """Reusable SPD solver: dense Cholesky up to ``dense_threshold`` unknowns, CG beyond."""

    def __init__(self, M, tol=1e-12, dense_threshold=DENSE_THRESHOLD, level=None):
        self.M = M
        self.n = M.shape[0]
        self.tol = tol
        self.level = level
        self.chol = None
        self.last_iters = 0
        if self.n <= dense_threshold:
            try:
                self.chol = Cholesky(to_dense(M))
            except NotSPDError as exc:
                where = f"level {level}: " if level is not None else ""
                raise NotSPDError(exc.pivot, f"{where}{exc}") from exc

    def solve(self, rhs, tol=None):
        rhs = np.asarray(rhs, dtype=np.float64)
        if self.n == 0:
            return np.zeros_like(rhs)
        if self.chol is not None:
            return self.chol.solve(rhs)
        res = cg_solve(self.M, rhs, tol=self.tol if tol is None else tol)
        self.last_iters = res.iters
        if not res.converged:
            raise ConvergenceError(
                f"level {self.level}: CG stalled at relative residual {res.residual:.3e}",
                level=self.level,
                residual=res.residual,
            )
        return res.x


@dataclass
class GambletHierarchy:
    """Per-level operators of a (possibly localized) gamblet transform.

    ``A[k]`` for k = 1..q (``A[q]`` is the input matrix), ``B[k]``, ``R[k]``
    (= R^(k-1,k)) and ``D[k]`` (= D^(k,k-1)) for k = 2..q. Entries are CSR
    matrices or dense arrays for levels that fill in. Gamblets ``psi(k)`` and
    orthogonalized gamblets ``chi(k)`` are assembled on first use from the
    restriction chain.
    """

    ops: object
    A: dict
    B: dict
    R: dict
    D: dict
    localized: bool = False
    solve_tol: dict = field(default_factory=dict)
    dense_threshold: int = DENSE_THRESHOLD
    info: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def q(self):
        return self.ops.q

    @property
    def N(self):
        return self.A[self.q].shape[0]

    def tol(self, k):
        return self.solve_tol.get(k, 1e-12)

    def _solver(self, key, M, k):
        if key not in self._cache:
            self._cache[key] = LevelSolver(M, tol=self.tol(k), dense_threshold=self.dense_threshold, level=k)
        return self._cache[key]

    def B_solver(self, k):
        return self._solver(("B", k), self.B[k], k)

    def A_solver(self, k):
        return self._solver(("A", k), self.A[k], k)

    def psi(self, k):
        """Psi^(k): row i holds the coordinates of gamblet psi_i^(k) in R^N."""
        key = ("psi", k)
        if key not in self._cache:
            if k == self.q:
                self._cache[key] = sp.identity(self.N, format="csr")
            else:
                self._cache[key] = mul(self.R[k + 1], self.psi(k + 1))
        return self._cache[key]

    def chi(self, k):
        """Chi^(k) = W^(k) Psi^(k), the orthogonalized gamblets of subband k."""
        key = ("chi", k)
        if key not in self._cache:
            self._cache[key] = mul(self.ops.W[k], self.psi(k))
        return self._cache[key]

    def N_matrix(self, k):
        """N^(k) = A^(k) W^(k),T B^(k),-1 (I^(k) x J^(k))."""
        WA = to_dense(mul(self.ops.W[k], self.A[k]))
        return self.B_solver(k).solve(WA).T

    def restrict(self, b, k_to):
        """R^(k_to,q) b: push a level-q vector down to level ``k_to``."""
        for k in range(self.q, k_to, -1):
            b = np.asarray(self.R[k] @ b).ravel()
        return b

    def prolong(self, x, k_from):
        """Psi^(k_from),T x computed through the transposed restriction chain."""
        for k in range(k_from + 1, self.q + 1):
            x = np.asarray(self.R[k].T @ x).ravel()
        return x

    def level_nnz(self):
        out = {}
        for k in range(1, self.q + 1):
            out[f"A_{k}"] = nnz(self.A[k])
            if k >= 2:
                out[f"B_{k}"] = nnz(self.B[k])
                out[f"R_{k}"] = nnz(self.R[k])
        return out

    def total_nnz(self):
        return int(sum(self.level_nnz().values()))


@dataclass
class SubbandSolution:
    """Subband components v[k], coefficients w[k] and measurements b[k] of one solve."""

    v: dict
    w: dict
    b: dict
    u: np.ndarray


def _check_inputs(A, ops):
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"A must be square, got {A.shape}")
    if A.shape[0] != ops.tree.N:
        raise StructureError(f"A has {A.shape[0]} rows but the tree has {ops.tree.N} leaves")
    if not is_symmetric(A):
        raise StructureError("A is not symmetric")
    for k in range(2, ops.q + 1):
        nI = ops.tree.size(k)
        if ops.W[k].shape[1] != nI or ops.pi[k - 1].shape != (ops.tree.size(k - 1), nI):
            raise StructureError(f"operators at level {k} do not match the tree")


def transform_tol(tol):
    """Accuracy of the D solves. Errors in D break the A-orthogonality of the
    subbands and reappear amplified in the solve residual, so these systems
    are solved two digits tighter than the subband solves."""
    return max(tol * 1e-2, 1e-14)


def gamblet_transform(A, ops, tol=1e-12, dense_threshold=DENSE_THRESHOLD):
    """Exact level-by-level gamblet hierarchy of the SPD matrix ``A``.

    For k = q..2: B = W A Wᵀ, D = B⁻¹ W A π̄ᵀ, R = π̄ − Dᵀ W and
    A^(k-1) = R A Rᵀ, with no entries dropped.
    """
    A = as_csr(A)
    _check_inputs(A, ops)
    q = ops.q
    h = GambletHierarchy(ops, {q: A}, {}, {}, {}, localized=False, dense_threshold=dense_threshold)
    h.solve_tol = {k: tol for k in range(1, q + 1)}
    for k in range(q, 1, -1):
        Ak = h.A[k]
        Wk = ops.W[k]
        pb = ops.pibar(k - 1)
        h.B[k] = symmetrize(mul(Wk, mul(Ak, Wk.T)))
        WAp = to_dense(mul(Wk, mul(Ak, pb.T)))
        h.D[k] = h.B_solver(k).solve(WAp, tol=transform_tol(tol))
        h.R[k] = sub(pb, mul(h.D[k].T, Wk))
        h.A[k - 1] = symmetrize(mul(h.R[k], mul(Ak, h.R[k].T)))
    h.info = {"mode": "exact", "inner_tol": tol, "transform_tol": transform_tol(tol), "nnz": h.level_nnz()}
    return h


def _solve_levels(h, b):
    q = h.q
    bs, ws, vs = {q: b}, {}, {}
    bk = b
    for k in range(q, 1, -1):
        Wk = h.ops.W[k]
        ws[k] = np.asarray(h.B_solver(k).solve(np.asarray(Wk @ bk).ravel()))
        vs[k] = h.prolong(np.asarray(Wk.T @ ws[k]).ravel(), k)
        bk = np.asarray(h.R[k] @ bk).ravel()
        bs[k - 1] = bk
    ws[1] = np.asarray(h.A_solver(1).solve(bk))
    vs[1] = h.prolong(ws[1], 1)
    return SubbandSolution(vs, ws, bs, reconstruct_parts(vs))


def reconstruct_parts(v):
    return np.sum([v[k] for k in sorted(v)], axis=0)


def gamblet_solve(h, b, ops=None):
    """Solve A u = b by independent subband solves; returns a :class:`SubbandSolution`."""
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.shape[0] != h.N:
        raise DimensionError(f"right-hand side has length {b.shape[0]}, expected {h.N}")
    return _solve_levels(h, b)


def decompose(h, u, ops=None):
    """Split ``u`` into its A-orthogonal subband components."""
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.shape[0] != h.N:
        raise DimensionError(f"vector has length {u.shape[0]}, expected {h.N}")
    return _solve_levels(h, np.asarray(h.A[h.q] @ u).ravel())


def reconstruct(s):
    """u = sum of the subband components."""
    return reconstruct_parts(s.v)


def compressed_inverse_apply(h, k, b, ops=None):
    """Rank-|I^(k)| approximation Psi^(k),T A^(k),-1 R^(k,q) b of A⁻¹ b."""
    if not 1 <= k <= h.q:
        raise StructureError(f"level {k} outside 1..{h.q}")
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.shape[0] != h.N:
        raise DimensionError(f"right-hand side has length {b.shape[0]}, expected {h.N}")
    bk = h.restrict(b, k)
    return h.prolong(np.asarray(h.A_solver(k).solve(bk)), k)


def theta_matrix(A, Phi):
    """Theta = Phi A⁻¹ Phiᵀ for dense ``A`` and measurement rows ``Phi``."""
    A = to_dense(A)
    Phi = np.atleast_2d(to_dense(Phi))
    if A.shape[0] > DENSE_CAP:
        raise CapacityError(f"dense oracle limited to {DENSE_CAP} unknowns")
    T = Phi @ Cholesky(A).solve(Phi.T)
    T = 0.5 * (T + T.T)
    try:
        Cholesky(T)
    except NotSPDError as exc:
        raise RankError(f"Phi A^-1 Phi^T is singular (pivot {exc.pivot})") from exc
    return T


def gamblet_oracle(A, Phi, i=None, method="formula"):
    """Dense gamblet(s) for measurement rows ``Phi``.

    ``method="formula"`` evaluates A⁻¹Φᵀ(ΦA⁻¹Φᵀ)⁻¹e_i; ``method="kkt"``
    instead solves the constrained energy minimization min ψᵀAψ subject to
    Φψ = e_i through its saddle-point system. Returns the row for index
    ``i`` or, with ``i=None``, the matrix whose rows are all gamblets.
    """
    A = to_dense(A)
    Phi = np.atleast_2d(to_dense(Phi))
    m, n = Phi.shape
    E = np.eye(m) if i is None else np.eye(m)[:, [i]]
    if method == "formula":
        T = theta_matrix(A, Phi)
        X = Cholesky(A).solve(Phi.T) @ Cholesky(T).solve(E)
    elif method == "kkt":
        K = np.zeros((n + m, n + m))
        K[:n, :n] = A
        K[:n, n:] = Phi.T
        K[n:, :n] = Phi
        rhs = np.zeros((n + m, E.shape[1]))
        rhs[n:] = E
        if np.linalg.matrix_rank(Phi) < m:
            raise RankError("measurement rows are linearly dependent")
        X = np.linalg.solve(K, rhs)[:n]
    else:
        raise ValueError(f"unknown method {method!r}")
    return X[:, 0] if i is not None else X.T


def export_hierarchy(h, directory, extra=None):
    """Write A_k, B_k, R_k, Psi_k matrices and a manifest.json describing them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tag = "loc_" if h.localized else ""
    for k in range(1, h.q + 1):
        mm_write(d / f"{tag}A_{k}.mtx", as_csr(h.A[k]))
        mm_write(d / f"{tag}Psi_{k}.mtx", as_csr(h.psi(k)))
        if k >= 2:
            mm_write(d / f"{tag}B_{k}.mtx", as_csr(h.B[k]))
            mm_write(d / f"{tag}R_{k}.mtx", as_csr(h.R[k]))
    manifest = {
        "q": h.q,
        "localized": h.localized,
        "level_sizes": list(h.ops.tree.sizes),
        "J_sizes": {str(k): int(h.ops.W[k].shape[0]) for k in range(2, h.q + 1)},
        "orthonormal": h.ops.orthonormal,
        "cellular": h.ops.cellular,
        "tolerances": {str(k): v for k, v in h.solve_tol.items()},
        "info": h.info,
    }
    if extra:
        manifest.update(extra)
    dump_json(d / "manifest.json", manifest)
    return manifest
