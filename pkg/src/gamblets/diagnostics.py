"""Measurements of conditioning, accuracy, decay and energy for gamblet hierarchies."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import CapacityError, ConvergenceError, DimensionError
from .exact import gamblet_solve
from .io_utils import dump_json
from .sparse_core import DENSE_CAP, Cholesky, cg_solve, to_dense

#: magnitudes below this are treated as zero in decay fits
DECAY_FLOOR = 1e-14


@dataclass
class DiagnosticReport:
    metrics: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metrics": self.metrics,
            "curves": {k: [[float(x), float(y)] for x, y in v] for k, v in self.curves.items()},
            "notes": self.notes,
        }

    def save(self, path):
        dump_json(path, self.to_dict())


def _cap(n, what):
    if n > DENSE_CAP:
        raise CapacityError(f"{what} is a dense computation limited to {DENSE_CAP} unknowns, got {n}")


def a_norm(A, x):
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(max(x @ np.asarray(A @ x).ravel(), 0.0)))


def a_inner(A, x, y):
    return float(np.asarray(x) @ np.asarray(A @ y).ravel())


def extreme_eigs(M, tol=1e-8, max_iters=20000, method="iterative", seed=0):
    """(lambda_min, lambda_max, cond) of an SPD matrix.

    ``method="iterative"``: power iteration for the top and inverse
    iteration (inner CG) for the bottom eigenvalue, each stopped when the
    Rayleigh quotient changes by less than ``tol`` relative between
    sweeps. ``method="dense"`` uses a full symmetric eigensolve.
    """
    n = M.shape[0]
    if n == 0:
        raise DimensionError("empty matrix")
    if method == "dense":
        _cap(n, "dense eigensolve")
        ev = scipy.linalg.eigvalsh(to_dense(M))
        return float(ev[0]), float(ev[-1]), float(ev[-1] / ev[0])
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(n)
    if n <= 64:
        chol = Cholesky(M)
        inv = chol.solve
    else:
        def inv(x):
            res = cg_solve(M, x, tol=min(1e-12, tol * 1e-3))
            return res.x

    lmax = _rayleigh_iteration(lambda x: np.asarray(M @ x).ravel(), M, start, tol, max_iters, "power iteration")
    lmin = _rayleigh_iteration(inv, M, start, tol, max_iters, "inverse iteration")
    return lmin, lmax, lmax / lmin


def _rayleigh_iteration(apply, M, v, tol, max_iters, name):
    v = v / np.linalg.norm(v)
    mu = v @ np.asarray(M @ v).ravel()
    for _ in range(max_iters):
        y = apply(v)
        ny = np.linalg.norm(y)
        if not np.isfinite(ny) or ny == 0:
            raise ConvergenceError(f"{name} broke down", residual=float("nan"))
        v = y / ny
        Mv = np.asarray(M @ v).ravel()
        mu_new = v @ Mv
        if abs(mu_new - mu) <= tol * abs(mu_new):
            return float(mu_new)
        mu = mu_new
    resid = float(np.linalg.norm(Mv - mu * v) / abs(mu))
    raise ConvergenceError(f"{name} did not converge in {max_iters} sweeps", residual=resid)


def conditioning(h, method="iterative", tol=1e-8):
    """cond(A^(1)) and cond(B^(k)), k = 2..q, as a dict keyed by level."""
    out = {1: extreme_eigs(h.A[1], tol=tol, method=method)[2]}
    for k in range(2, h.q + 1):
        if h.B[k].shape[0]:
            out[k] = extreme_eigs(h.B[k], tol=tol, method=method)[2]
    return out


def eigen_ranges(h, A=None):
    """Extremes of lambda_min(A) vᵀAv / |Av|² over V^(1) and each subband W^(k).

    Returns ``{k: (low, high)}``; dense generalized eigenproblems.
    """
    A = h.A[h.q] if A is None else A
    _cap(A.shape[0], "eigen_ranges")
    Ad = to_dense(A)
    lam_min = scipy.linalg.eigvalsh(Ad)[0]
    A2 = Ad @ Ad
    out = {}
    for k in range(1, h.q + 1):
        X = to_dense(h.psi(1) if k == 1 else h.chi(k))
        if X.shape[0] == 0:
            continue
        S = to_dense(h.A[1]) if k == 1 else to_dense(h.B[k])
        G = X @ A2 @ X.T
        ev = scipy.linalg.eigh(0.5 * (S + S.T), 0.5 * (G + G.T), eigvals_only=True)
        out[k] = (float(lam_min * ev[0]), float(lam_min * ev[-1]))
    return out


def error_curve(h, b):
    """|u - u^(k)|_A for k = 1..q, where u^(k) sums the first k subbands."""
    s = gamblet_solve(h, b)
    A = h.A[h.q]
    out = []
    partial = np.zeros_like(s.u)
    for k in range(1, h.q + 1):
        partial = partial + s.v[k]
        out.append(a_norm(A, s.u - partial))
    return out


def subband_energy(s, A):
    """Per-level energies |v^(k)|_A² and their shares of |u|_A²."""
    energies = {k: a_norm(A, s.v[k]) ** 2 for k in sorted(s.v)}
    total = a_norm(A, s.u) ** 2
    shares = {k: (e / total if total > 0 else 0.0) for k, e in energies.items()}
    return energies, shares


def _orth_rows(P):
    """Orthonormal basis (columns) of the row space of P."""
    P = to_dense(P)
    Q, _ = np.linalg.qr(P.T)
    return Q


def poincare_constants(A, ops):
    """Per level: inf over Img(pi^(q,k)) and sup over Ker(pi^(k,q)) of sqrt(xᵀA⁻¹x)/|x|.

    Returns ``{k: (inf, sup)}``; ``sup`` is 0 at k = q where the kernel is trivial.
    """
    N = A.shape[0]
    _cap(N, "poincare_constants")
    Ainv = Cholesky(A).solve(np.eye(N))
    Ainv = 0.5 * (Ainv + Ainv.T)
    out = {}
    for k in range(1, ops.q + 1):
        Q = _orth_rows(ops.pi_to_fine(k))
        low = scipy.linalg.eigvalsh(Q.T @ Ainv @ Q)[0]
        if Q.shape[1] < N:
            Pk = np.eye(N) - Q @ Q.T
            high = scipy.linalg.eigvalsh(Pk @ Ainv @ Pk)[-1]
        else:
            high = 0.0
        out[k] = (float(np.sqrt(max(low, 0.0))), float(np.sqrt(max(high, 0.0))))
    return out


def fit_poincare(constants, lam_min):
    """Fit H and C from the scaled constants.

    Both sqrt(lam_min) inf_k and sqrt(lam_min) sup_k should behave like
    H^k; a common slope in k is fitted by least squares with one intercept
    per series. C is the smallest constant for which both bounds hold at
    every level with the fitted H.
    """
    ks, ys, series = [], [], []
    s = np.sqrt(lam_min)
    for k, (lo, hi) in sorted(constants.items()):
        if lo > 0:
            ks.append(k)
            ys.append(np.log(s * lo))
            series.append(0)
        if hi > 0:
            ks.append(k)
            ys.append(np.log(s * hi))
            series.append(1)
    ks, ys, series = map(np.asarray, (ks, ys, series))
    X = np.column_stack([ks, series == 0, series == 1]).astype(float)
    coef, *_ = np.linalg.lstsq(X, ys, rcond=None)
    H = float(np.exp(coef[0]))
    C = 1.0
    for k, (lo, hi) in constants.items():
        if lo > 0:
            C = max(C, H**k / (s * lo))
        if hi > 0:
            C = max(C, s * hi / H**k)
    return H, float(C)


def posterior_cov_diag(h, k, method="cholesky"):
    """Diagonal of Gamma^(k) = A⁻¹ - Psi^(k)ᵀ A^(k),-1 Psi^(k).

    ``method="projection"`` evaluates the same matrix as (I - Psiᵀ pi^(k,q)) A⁻¹.
    """
    A = h.A[h.q]
    N = A.shape[0]
    _cap(N, "posterior_cov_diag")
    Ainv = Cholesky(A).solve(np.eye(N))
    Psi = to_dense(h.psi(k))
    if method == "cholesky":
        Y = Cholesky(h.A[k]).solve_lower(Psi)
        return np.diag(Ainv) - np.einsum("ij,ij->j", Y, Y)
    if method == "projection":
        P = to_dense(h.ops.pi_to_fine(k))
        G = Ainv - Psi.T @ (P @ Ainv)
        return np.diag(G).copy()
    raise ValueError(f"unknown method {method!r}")


@dataclass
class DecayProfile:
    distance: np.ndarray
    magnitude: np.ndarray
    slope: float
    intercept: float
    r2: float


def _fit_decay(n, m):
    sel = (n >= 1) & (m >= DECAY_FLOOR)
    x, y = n[sel].astype(float), np.log(m[sel])
    if x.size < 2 or np.ptp(x) == 0:
        return float("nan"), float("nan"), float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - pred) ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def _row(M, i):
    return M[[i]].toarray().ravel() if sp.issparse(M) else np.asarray(M[i], dtype=float).ravel()


def decay_profile(h, dist, k, i, which="psi"):
    """Largest |entry| at each graph distance n from index i.

    ``which="psi"`` scans row i of Psi^(k), placing each fine unknown at
    the distance of its level-k ancestor; ``which="stiffness"`` scans row i
    of A^(k). ``dist`` must be the level-k distance.
    """
    dfrom = dist.distances_from(i)
    if which == "psi":
        row = np.abs(_row(h.psi(k), i))
        d = dfrom[h.ops.tree.ancestor(k)]
    elif which == "stiffness":
        row = np.abs(_row(h.A[k], i))
        d = dfrom
    else:
        raise ValueError(f"unknown profile {which!r}")
    finite = np.isfinite(d)
    dmax = int(d[finite].max()) if finite.any() else 0
    n = np.arange(dmax + 1)
    mag = np.zeros(dmax + 1)
    np.maximum.at(mag, d[finite].astype(int), row[finite])
    slope, intercept, r2 = _fit_decay(n, mag)
    return DecayProfile(n, mag, slope, intercept, r2)


def fast_vs_exact_report(exact, fast, A):
    """Per-level |v^(k) - v^(k),loc|_A and the total |u - u^loc|_A."""
    if set(exact.v) != set(fast.v) or exact.u.shape != fast.u.shape:
        raise DimensionError("solutions have different shapes")
    per = {k: a_norm(A, exact.v[k] - fast.v[k]) for k in sorted(exact.v)}
    return per, a_norm(A, exact.u - fast.u)
