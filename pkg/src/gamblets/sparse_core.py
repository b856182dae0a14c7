"""Sparse and dense linear-algebra substrate.

Matrices are held as canonical ``scipy.sparse.csr_matrix`` objects (sorted
column indices, duplicates summed). Levels of a hierarchy that fill in
completely are held as plain ``numpy`` arrays; every routine here accepts
either.
"""

from collections import namedtuple
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.linalg.lapack import dpotrf

from .errors import (
    BreakdownError,
    ConvergenceError,
    DimensionError,
    MatrixMarketError,
    NotSPDError,
)

#: systems with at most this many unknowns are factorized densely
DENSE_THRESHOLD = 512
#: largest size for which dense O(N^3) oracles are allowed
DENSE_CAP = 4096

CGResult = namedtuple("CGResult", ["x", "iters", "residual", "converged"])


def as_csr(M):
    """Return ``M`` as a canonical float64 CSR matrix (sorted, duplicates merged)."""
    if sp.issparse(M):
        out = sp.csr_matrix(M, dtype=np.float64, copy=True)
    else:
        out = sp.csr_matrix(np.atleast_2d(np.asarray(M, dtype=np.float64)))
    out.sum_duplicates()
    out.sort_indices()
    return out


def to_dense(M):
    if sp.issparse(M):
        return M.toarray()
    return np.asarray(M, dtype=np.float64)


def compact(M, fill=0.25):
    """Densify ``M`` when its fill ratio exceeds ``fill``, else return canonical CSR."""
    if sp.issparse(M):
        n = M.shape[0] * M.shape[1]
        if n and M.nnz > fill * n:
            return M.toarray()
        return as_csr(M)
    return np.asarray(M, dtype=np.float64)


def nnz(M):
    if sp.issparse(M):
        return int(M.nnz)
    return int(np.count_nonzero(M))


def max_abs(M):
    if sp.issparse(M):
        return float(abs(M).max()) if M.nnz else 0.0
    M = np.asarray(M)
    return float(np.abs(M).max()) if M.size else 0.0


def symmetry_defect(M):
    """max |M_ij - M_ji| computed by explicit transpose comparison."""
    if sp.issparse(M):
        return max_abs(M - M.T)
    M = np.asarray(M)
    return float(np.abs(M - M.T).max()) if M.size else 0.0


def is_symmetric(M, tol=1e-12):
    """True if max|M_ij - M_ji| <= tol * max|M|."""
    if M.shape[0] != M.shape[1]:
        return False
    return symmetry_defect(M) <= tol * max(max_abs(M), np.finfo(float).tiny)


def symmetrize(M):
    """Return (M + M^T) / 2 in the same storage kind as ``M``."""
    if sp.issparse(M):
        return as_csr((M + M.T) * 0.5)
    return 0.5 * (M + M.T)


def spmv(M, x):
    """Matrix-vector product with a shape check."""
    x = np.asarray(x, dtype=np.float64)
    if M.shape[1] != x.shape[0]:
        raise DimensionError(f"matrix has {M.shape[1]} columns, vector has length {x.shape[0]}")
    y = np.asarray(M @ x, dtype=np.float64)
    return y.ravel() if x.ndim == 1 else y


def cg_solve(M, b, tol=1e-10, max_iters=None, precond=None, x0=None):
    """Conjugate gradients for an SPD matrix ``M``.

    ``b`` may be a vector or a 2-D array, in which case every column is an
    independent system sharing the matrix products. Iteration stops when the
    relative residual ``|b - Mx| / |b|`` of every column is at most ``tol``.

    Returns a :data:`CGResult`; ``residual`` is the largest relative residual
    over the columns and ``converged`` is False when ``max_iters`` ran out.
    Raises :class:`BreakdownError` on non-finite values or a non-positive
    curvature ``p^T M p``.
    """
    b = np.asarray(b, dtype=np.float64)
    if M.shape[0] != M.shape[1] or M.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot solve {M.shape} system with right-hand side of shape {b.shape}")
    vector = b.ndim == 1
    B = b.reshape(-1, 1) if vector else b
    n = M.shape[0]
    if max_iters is None:
        max_iters = max(10 * n, 50)

    if precond is None:
        dinv = None
    elif precond == "jacobi":
        diag = M.diagonal() if sp.issparse(M) else np.diag(M)
        if np.any(diag <= 0):
            raise NotSPDError(int(np.argmin(diag)), "Jacobi preconditioner needs a positive diagonal")
        dinv = (1.0 / diag)[:, None]
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")

    bnorm = np.linalg.norm(B, axis=0)
    scale = np.where(bnorm > 0, bnorm, 1.0)
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=np.float64).reshape(B.shape)
    it = 0
    # the recurrence residual drifts from the true one on ill-conditioned
    # systems; restart from the true residual a few times when that happens
    for _ in range(4):
        X, it = _cg_sweep(M, B, X, scale, dinv, tol, it, max_iters)
        true_res = np.linalg.norm(B - np.asarray(M @ X), axis=0) / scale
        if np.all(true_res <= tol) or it >= max_iters:
            break
    residual = float(true_res.max()) if true_res.size else 0.0
    converged = bool(np.all(true_res <= tol))
    x = X.ravel() if vector else X
    return CGResult(x, it, residual, converged)


def _cg_sweep(M, B, X, scale, dinv, tol, it, max_iters):
    Rr = B - np.asarray(M @ X) if np.any(X) else B.copy()
    relres = np.linalg.norm(Rr, axis=0) / scale
    Z = Rr * dinv if dinv is not None else Rr
    P = Z.copy()
    rz = np.einsum("ij,ij->j", Rr, Z)
    while it < max_iters and np.any(relres > tol):
        it += 1
        active = relres > tol
        MP = np.asarray(M @ P)
        pmp = np.einsum("ij,ij->j", P, MP)
        if not np.all(np.isfinite(pmp)):
            raise BreakdownError(it)
        if np.any(pmp[active] <= 0):
            raise BreakdownError(it, f"non-positive curvature at iteration {it}; matrix is not SPD")
        alpha = np.where(active, rz / np.where(pmp > 0, pmp, 1.0), 0.0)
        X = X + alpha * P
        Rr = Rr - alpha * MP
        if not np.all(np.isfinite(Rr)):
            raise BreakdownError(it)
        relres = np.linalg.norm(Rr, axis=0) / scale
        Z = Rr * dinv if dinv is not None else Rr
        rz_new = np.einsum("ij,ij->j", Rr, Z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new
    return X, it


class Cholesky:
    """Dense Cholesky factorization with pivot reporting."""

    def __init__(self, M):
        M = to_dense(M)
        if M.shape[0] != M.shape[1]:
            raise DimensionError(f"expected a square matrix, got {M.shape}")
        c, info = dpotrf(M, lower=1, clean=1, overwrite_a=0)
        if info > 0:
            raise NotSPDError(info - 1)
        if info < 0:
            raise ValueError(f"dpotrf argument {-info} invalid")
        self.n = M.shape[0]
        self.factor = c

    def solve(self, B):
        B = np.asarray(B, dtype=np.float64)
        if B.shape[0] != self.n:
            raise DimensionError(f"factor has size {self.n}, right-hand side has {B.shape[0]} rows")
        if self.n == 0:
            return np.zeros_like(B)
        return scipy.linalg.cho_solve((self.factor, True), B, check_finite=False)

    def solve_lower(self, B):
        """Apply L^{-1} where M = L L^T."""
        return scipy.linalg.solve_triangular(self.factor, B, lower=True, check_finite=False)


def dense_solve(M, B):
    """Return M^{-1} B through a symmetric (Cholesky) factorization.

    Raises :class:`NotSPDError` naming the zero-based pivot index on failure.
    """
    return Cholesky(M).solve(B)


def spd_solve(M, rhs, tol=1e-12, dense_threshold=DENSE_THRESHOLD, max_iters=None, level=None):
    """Solve an SPD system, densely below ``dense_threshold`` unknowns, by CG above it.

    Raises :class:`ConvergenceError` (carrying ``level`` and the residual)
    when CG does not converge.
    """
    if M.shape[0] <= dense_threshold:
        try:
            return dense_solve(M, rhs)
        except NotSPDError as exc:
            if level is not None:
                raise NotSPDError(exc.pivot, f"level {level}: {exc}") from exc
            raise
    res = cg_solve(M, rhs, tol=tol, max_iters=max_iters)
    if not res.converged:
        where = f" at level {level}" if level is not None else ""
        raise ConvergenceError(
            f"CG did not converge{where}: residual {res.residual:.3e} after {res.iters} iterations",
            level=level,
            residual=res.residual,
        )
    return res.x


# --------------------------------------------------------------------------
# Matrix Market I/O
# --------------------------------------------------------------------------

_FIELDS = ("real", "double", "integer")
_SYMMETRIES = ("general", "symmetric")


def _fmt(x):
    return format(float(x), ".17g")


def mm_write(path, M, comment=None):
    """Write a sparse or dense matrix in coordinate/real/general form (1-based)."""
    M = as_csr(M)
    coo = M.tocoo()
    lines = ["%%MatrixMarket matrix coordinate real general"]
    if comment:
        lines.extend("% " + c for c in comment.splitlines())
    lines.append(f"{M.shape[0]} {M.shape[1]} {coo.nnz}")
    lines.extend(f"{i + 1} {j + 1} {_fmt(v)}" for i, j, v in zip(coo.row, coo.col, coo.data))
    Path(path).write_text("\n".join(lines) + "\n")


def mm_write_vector(path, x, comment=None):
    """Write a vector as an n x 1 coordinate matrix listing every entry."""
    x = np.asarray(x, dtype=np.float64).ravel()
    lines = ["%%MatrixMarket matrix coordinate real general"]
    if comment:
        lines.extend("% " + c for c in comment.splitlines())
    lines.append(f"{x.size} 1 {x.size}")
    lines.extend(f"{i + 1} 1 {_fmt(v)}" for i, v in enumerate(x))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_header(lines):
    if not lines:
        raise MatrixMarketError("empty file", line=1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != "%%MatrixMarket":
        raise MatrixMarketError("missing %%MatrixMarket header", line=1)
    obj, fmt, field, symm = (t.lower() for t in head[1:])
    if obj != "matrix":
        raise MatrixMarketError(f"unsupported object {obj!r}", line=1)
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(f"unsupported format {fmt!r}", line=1)
    if field not in _FIELDS:
        raise MatrixMarketError(f"unsupported field {field!r}", line=1)
    if symm not in _SYMMETRIES:
        raise MatrixMarketError(f"unsupported symmetry {symm!r}", line=1)
    return fmt, symm


def _data_lines(lines):
    for lineno, text in enumerate(lines[1:], start=2):
        s = text.strip()
        if not s or s.startswith("%"):
            continue
        yield lineno, s.split()


def _parse_coordinate(lines, symm):
    rows = _data_lines(lines)
    try:
        lineno, size = next(rows)
    except StopIteration:
        raise MatrixMarketError("missing size line", line=len(lines)) from None
    try:
        nrows, ncols, count = (int(t) for t in size)
    except ValueError:
        raise MatrixMarketError("size line must hold three integers", line=lineno) from None
    if nrows < 0 or ncols < 0 or count < 0:
        raise MatrixMarketError("negative size", line=lineno)
    I = np.empty(count, dtype=np.int64)
    J = np.empty(count, dtype=np.int64)
    V = np.empty(count, dtype=np.float64)
    k = 0
    for lineno, toks in rows:
        if k >= count:
            raise MatrixMarketError(f"more than the declared {count} entries", line=lineno)
        if len(toks) != 3:
            raise MatrixMarketError("entry must be 'row col value'", line=lineno)
        try:
            i, j, v = int(toks[0]), int(toks[1]), float(toks[2])
        except ValueError:
            raise MatrixMarketError("malformed entry", line=lineno) from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise MatrixMarketError(f"index ({i}, {j}) out of bounds for {nrows}x{ncols}", line=lineno)
        I[k], J[k], V[k] = i - 1, j - 1, v
        k += 1
    if k != count:
        raise MatrixMarketError(f"expected {count} entries, found {k}", line=len(lines))
    if symm == "symmetric":
        off = I != J
        I, J, V = np.concatenate([I, J[off]]), np.concatenate([J, I[off]]), np.concatenate([V, V[off]])
    return as_csr(sp.coo_matrix((V, (I, J)), shape=(nrows, ncols)))


def mm_read(path):
    """Read a coordinate Matrix Market file into a canonical CSR matrix.

    Array-format files are rejected; use :func:`mm_read_vector` for vectors.
    """
    lines = Path(path).read_text().splitlines()
    fmt, symm = _read_header(lines)
    if fmt != "coordinate":
        raise MatrixMarketError("array format is not accepted for matrices", line=1)
    return _parse_coordinate(lines, symm)


def mm_read_vector(path):
    """Read an n x 1 (or 1 x n) vector in coordinate or array form."""
    lines = Path(path).read_text().splitlines()
    fmt, symm = _read_header(lines)
    if fmt == "coordinate":
        M = _parse_coordinate(lines, symm)
        if 1 not in M.shape:
            raise MatrixMarketError(f"expected a vector, got shape {M.shape}", line=1)
        return M.toarray().ravel()
    rows = _data_lines(lines)
    try:
        lineno, size = next(rows)
        nrows, ncols = (int(t) for t in size)
    except (StopIteration, ValueError):
        raise MatrixMarketError("malformed array size line", line=2) from None
    if 1 not in (nrows, ncols):
        raise MatrixMarketError(f"expected a vector, got shape ({nrows}, {ncols})", line=lineno)
    vals = []
    for lineno, toks in rows:
        if len(toks) != 1:
            raise MatrixMarketError("array entry must be a single value", line=lineno)
        try:
            vals.append(float(toks[0]))
        except ValueError:
            raise MatrixMarketError("malformed value", line=lineno) from None
    if len(vals) != nrows * ncols:
        raise MatrixMarketError(f"expected {nrows * ncols} values, found {len(vals)}", line=len(lines))
    return np.asarray(vals)
