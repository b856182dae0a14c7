"""Index trees, nesting matrices and cellular wavelet matrices.

Conventions
-----------
Levels run from 1 (coarsest) to q (finest). Labels at level k < q are the
contiguous integers ``0..|I^(k)|-1`` in lexicographic tuple order, so the
children of a label form a contiguous range at level k+1. Operators act on
the *original* unknown ordering at level q: the tree's ``leaf_order`` maps a
level-q label to the row of A it names. "Level-k coordinates" therefore
means labels for k < q and row indices of A for k = q.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CapacityError, NotSPDError, RankError, StructureError
from .sparse_core import DENSE_CAP, Cholesky, as_csr, max_abs, mm_read, mm_write

#: largest number of leaves build_grid_tree will generate
MAX_LEAVES = 1 << 24


class IndexTree:
    """Nested label sets I^(1), ..., I^(q) with parent maps.

    Parameters
    ----------
    parents : sequence of int arrays
        ``parents[k - 2]`` maps each level-k label to its level-(k-1) parent,
        for k = 2..q. Each array must be nondecreasing and hit every label of
        the coarser level.
    root_size : int, optional
        Number of level-1 labels; required when q = 1.
    leaf_order : int array, optional
        Row of A named by each level-q label (a permutation). Identity if
        omitted.
    """

    def __init__(self, parents=(), root_size=None, leaf_order=None, dim=None, branch=None):
        parents = [np.asarray(p, dtype=np.int64) for p in parents]
        if parents:
            n1 = int(parents[0].max()) + 1 if parents[0].size else 0
            if root_size is not None and root_size != n1:
                raise StructureError(f"root_size {root_size} disagrees with parent map ({n1} labels)")
        elif root_size is None:
            raise StructureError("a depth-1 tree needs root_size")
        else:
            n1 = int(root_size)
        sizes = [n1]
        for k, p in enumerate(parents, start=2):
            if p.ndim != 1 or p.size == 0:
                raise StructureError(f"level {k} parent map must be a nonempty 1-D array")
            if np.any(np.diff(p) < 0):
                raise StructureError(f"level {k} parent map is not nondecreasing (children not contiguous)")
            if p[0] != 0 or p[-1] != sizes[-1] - 1 or np.any(np.diff(p) > 1):
                raise StructureError(f"level {k} parent map does not cover every level-{k - 1} label")
            sizes.append(p.size)
        self.q = len(sizes)
        self.sizes = tuple(sizes)
        self._parent = {k: p for k, p in enumerate(parents, start=2)}
        self._offsets = {
            k: np.searchsorted(self._parent[k + 1], np.arange(sizes[k - 1] + 1)) for k in range(1, self.q)
        }
        N = sizes[-1]
        if leaf_order is None:
            leaf_order = np.arange(N)
        leaf_order = np.asarray(leaf_order, dtype=np.int64)
        if leaf_order.shape != (N,) or not np.array_equal(np.sort(leaf_order), np.arange(N)):
            raise StructureError("leaf_order must be a permutation of the level-q labels")
        self.leaf_order = leaf_order
        self.node_label = np.empty(N, dtype=np.int64)
        self.node_label[leaf_order] = np.arange(N)
        self.dim = dim
        self.branch = branch

    @classmethod
    def flat(cls, n):
        """Depth-1 tree with ``n`` labels."""
        return cls((), root_size=n)

    def __repr__(self):
        return f"IndexTree(q={self.q}, sizes={self.sizes})"

    @property
    def N(self):
        return self.sizes[-1]

    def size(self, k):
        self._check_level(k)
        return self.sizes[k - 1]

    def _check_level(self, k):
        if not 1 <= k <= self.q:
            raise StructureError(f"level {k} outside 1..{self.q}")

    def parent(self, k):
        """Level-(k-1) parent of every level-k label (k >= 2)."""
        if not 2 <= k <= self.q:
            raise StructureError(f"level {k} has no parent level")
        return self._parent[k]

    def child_offsets(self, k):
        """Offsets such that children of label i at level k are ``offsets[i]:offsets[i+1]``."""
        if not 1 <= k < self.q:
            raise StructureError(f"level {k} has no children")
        return self._offsets[k]

    def children(self, k, i):
        off = self.child_offsets(k)
        return range(int(off[i]), int(off[i + 1]))

    def label_ancestor(self, k_from, k_to):
        """Map level-``k_from`` labels to their level-``k_to`` ancestors."""
        self._check_level(k_from)
        self._check_level(k_to)
        if k_to > k_from:
            raise StructureError("ancestor level must not be finer")
        out = np.arange(self.sizes[k_from - 1])
        for k in range(k_from, k_to, -1):
            out = self._parent[k][out]
        return out

    def ancestor(self, k):
        """Level-k coordinate of every row of A (identity at k = q)."""
        self._check_level(k)
        if k == self.q:
            return np.arange(self.N)
        return self.label_ancestor(self.q, k)[self.node_label]

    def coord_parent(self, k):
        """Level-(k-1) label of every level-k coordinate."""
        p = self.parent(k)
        return p[self.node_label] if k == self.q else p

    def decode(self, k, label):
        """The k-tuple of sibling positions naming ``label`` at level k."""
        self._check_level(k)
        digits = []
        for lev in range(k, 1, -1):
            par = int(self._parent[lev][label])
            digits.append(int(label - self._offsets[lev - 1][par]))
            label = par
        digits.append(int(label))
        return tuple(reversed(digits))

    def box(self, k, label):
        """Spatial box ``(lo, hi)`` in the unit cube of a grid-tree label."""
        if self.dim is None:
            raise StructureError("tree has no geometry")
        n = self.branch**k
        coords = self._grid_coords(self.decode(k, label))
        lo = np.asarray(coords, dtype=float) / n
        return lo, lo + 1.0 / n

    def _grid_coords(self, digits):
        coords = [0] * self.dim
        for d in digits:
            for a in range(self.dim):
                coords[a] = coords[a] * self.branch + (d // self.branch**a) % self.branch
        return coords


def build_grid_tree(dim, q, branch=2):
    """Quadtree-style tree over a ``branch**q`` per-axis grid in ``dim`` dimensions.

    Level k has ``branch**(k*dim)`` cells. Leaves are mapped to row-major
    node indices (axis 0 fastest): node ``sum_a x_a * n**a`` with
    ``n = branch**q``.
    """
    if dim not in (1, 2, 3):
        raise StructureError(f"dim must be 1, 2 or 3, got {dim}")
    if branch < 2 or q < 1:
        raise StructureError("need branch >= 2 and q >= 1")
    m = branch**dim
    if m**q > MAX_LEAVES:
        raise CapacityError(f"{m**q} leaves exceed the limit of {MAX_LEAVES}")
    parents = [np.arange(m**k) // m for k in range(2, q + 1)]
    N = m**q
    n = branch**q
    labels = np.arange(N)
    coords = np.zeros((dim, N), dtype=np.int64)
    for lev in range(q):
        digit = (labels // m ** (q - 1 - lev)) % m
        for a in range(dim):
            coords[a] = coords[a] * branch + (digit // branch**a) % branch
    leaf_order = sum(coords[a] * n**a for a in range(dim))
    return IndexTree(parents, root_size=m, leaf_order=leaf_order, dim=dim, branch=branch)


def contiguous_tree(N, branch=2, coarse_size=1):
    """Tree grouping consecutive indices ``branch`` at a time until at most ``coarse_size`` remain.

    Works for any N; the last cell of a level may hold fewer children.
    """
    if N < 1 or branch < 2:
        raise StructureError("need N >= 1 and branch >= 2")
    sizes = [N]
    while sizes[-1] > max(coarse_size, 1):
        sizes.append(-(-sizes[-1] // branch))
    sizes.reverse()
    parents = [np.arange(sizes[k]) // branch for k in range(1, len(sizes))]
    return IndexTree(parents, root_size=sizes[0])


@dataclass
class HierarchyOperators:
    """Nesting matrices ``pi[k]`` (I^(k) x I^(k+1)) and wavelet matrices ``W[k]`` (J^(k) x I^(k)).

    ``W_parent[k][j]`` is the level-(k-1) cell owning row j of ``W[k]``.
    """

    tree: IndexTree
    pi: dict
    W: dict
    W_parent: dict
    orthonormal: bool = True
    cellular: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def q(self):
        return self.tree.q

    def J_size(self, k):
        return self.W[k].shape[0]

    def pibar(self, k):
        """pi-bar^(k,k+1), the pseudo-inverse of pi^(k+1,k)."""
        key = ("pibar", k)
        if key not in self._cache:
            self._cache[key] = pseudo_inverse_pi(self.pi[k], assume_orthonormal=self.orthonormal)
        return self._cache[key]

    def pi_to_fine(self, k):
        """pi^(k,q) = pi^(k,k+1) ... pi^(q-1,q); the identity at k = q."""
        key = ("pikq", k)
        if key not in self._cache:
            if k == self.q:
                M = sp.identity(self.tree.N, format="csr")
            else:
                M = self.pi[k]
                for j in range(k + 1, self.q):
                    M = M @ self.pi[j]
            self._cache[key] = as_csr(M)
        return self._cache[key]


def build_haar_pi(tree):
    """Cellular orthonormal nesting matrices from normalized cell indicators.

    Row i of pi^(k,k+1) holds 1/sqrt(m) on the m children of cell i.
    """
    pi = {}
    for k in range(1, tree.q):
        par = tree.coord_parent(k + 1)
        counts = np.bincount(par, minlength=tree.size(k))
        vals = 1.0 / np.sqrt(counts[par])
        cols = np.arange(par.size)
        pi[k] = as_csr(sp.coo_matrix((vals, (par, cols)), shape=(tree.size(k), par.size)))
    return pi


def _householder_complement(v):
    """Rows 2..m of the Householder reflector sending e1 to v/|v|."""
    m = v.size
    vhat = v / np.linalg.norm(v)
    w = -vhat
    w[0] += 1.0
    ww = w @ w
    H = np.eye(m)
    if ww > 1e-28:
        H -= (2.0 / ww) * np.outer(w, w)
    return H[1:]


def build_cellular_W(tree, pi):
    """Cellular orthonormal W^(k) spanning Ker(pi^(k-1,k)), one Householder block per cell.

    Returns ``(W, W_parent)`` dictionaries keyed by level k = 2..q.
    """
    W, W_parent = {}, {}
    for k in range(2, tree.q + 1):
        P = as_csr(pi[k - 1])
        par = tree.coord_parent(k)
        nI = par.size
        if P.shape != (tree.size(k - 1), nI):
            raise StructureError(f"pi^({k - 1},{k}) has shape {P.shape}, expected {(tree.size(k - 1), nI)}")
        order = np.argsort(par, kind="stable")
        starts = np.searchsorted(par[order], np.arange(tree.size(k - 1) + 1))
        rows, cols, vals, owner = [], [], [], []
        nrow = 0
        for i in range(tree.size(k - 1)):
            members = order[starts[i]:starts[i + 1]]
            lo, hi = P.indptr[i], P.indptr[i + 1]
            if not np.all(np.isin(P.indices[lo:hi], members)):
                raise StructureError(f"pi^({k - 1},{k}) row {i} is not cellular")
            v = P[i, members].toarray().ravel()
            if not np.any(v):
                raise StructureError(f"pi^({k - 1},{k}) row {i} vanishes on its cell")
            block = _householder_complement(v)
            r = block.shape[0]
            if r == 0:
                continue
            rr, cc = np.meshgrid(np.arange(nrow, nrow + r), members, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())
            owner.append(np.full(r, i))
            nrow += r
        if nrow:
            M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nrow, nI))
            W[k] = as_csr(M)
            W[k].eliminate_zeros()
            W_parent[k] = np.concatenate(owner)
        else:
            W[k] = sp.csr_matrix((0, nI))
            W_parent[k] = np.zeros(0, dtype=np.int64)
    return W, W_parent


def haar_operators(tree):
    """Haar nesting matrices plus Householder wavelets for ``tree``."""
    pi = build_haar_pi(tree)
    W, W_parent = build_cellular_W(tree, pi)
    return HierarchyOperators(tree, pi, W, W_parent, orthonormal=True, cellular=True)


def pseudo_inverse_pi(pi_k, assume_orthonormal=False):
    """(pi pi^T)^{-1} pi; returns ``pi`` itself when its rows are orthonormal."""
    P = as_csr(pi_k)
    G = as_csr(P @ P.T)
    n = G.shape[0]
    dev = max_abs(G - sp.identity(n, format="csr"))
    if assume_orthonormal and dev <= 1e-12 or dev <= 1e-15:
        return P.copy()
    diag = G.diagonal()
    offdiag = G - sp.diags(diag)
    if max_abs(offdiag) == 0.0:
        if np.any(diag <= 0):
            raise RankError(f"row {int(np.argmin(diag))} of pi vanishes")
        return as_csr(sp.diags(1.0 / diag) @ P)
    if n <= DENSE_CAP:
        try:
            chol = Cholesky(G.toarray())
        except NotSPDError as exc:
            raise RankError(f"pi pi^T is singular (pivot {exc.pivot})") from exc
        piv = np.diag(chol.factor) ** 2
        if piv.min() <= 1e-12 * diag.max():
            raise RankError(f"pi pi^T is numerically singular (pivot {int(np.argmin(piv))})")
        return as_csr(chol.solve(P.toarray()))
    lu = spla.splu(G.tocsc())
    if np.any(lu.U.diagonal() == 0):
        raise RankError("pi pi^T is singular")
    return as_csr(lu.solve(P.toarray()))


def verify_constructions(ops):
    """Deviations of the orthonormality/kernel identities and cellularity counts.

    Returns a dict of per-level maps plus the overall maxima.
    """
    tree = ops.tree
    rep = {
        "pi_orthonormality": {},
        "pi_worst_row": {},
        "pibar_identity": {},
        "W_orthonormality": {},
        "W_pi_product": {},
        "dimension_ok": {},
        "cellularity_violations": 0,
    }
    for k in range(1, tree.q):
        P = as_csr(ops.pi[k])
        E = abs(as_csr(P @ P.T) - sp.identity(P.shape[0], format="csr"))
        rowdev = np.asarray(E.max(axis=1).todense()).ravel() if E.nnz else np.zeros(P.shape[0])
        rep["pi_orthonormality"][k] = float(rowdev.max()) if rowdev.size else 0.0
        rep["pi_worst_row"][k] = int(np.argmax(rowdev)) if rowdev.size else 0
        try:
            pb = pseudo_inverse_pi(P)
            rep["pibar_identity"][k] = max_abs(pb @ P.T - sp.identity(P.shape[0]))
        except RankError:
            rep["pibar_identity"][k] = float("inf")
        par = tree.coord_parent(k + 1)
        coo = P.tocoo()
        rep["cellularity_violations"] += int(np.count_nonzero((coo.data != 0) & (par[coo.col] != coo.row)))
    for k in range(2, tree.q + 1):
        Wk = as_csr(ops.W[k])
        nJ = Wk.shape[0]
        rep["W_orthonormality"][k] = max_abs(as_csr(Wk @ Wk.T) - sp.identity(nJ, format="csr"))
        rep["W_pi_product"][k] = max_abs(Wk @ as_csr(ops.pi[k - 1]).T)
        rep["dimension_ok"][k] = nJ == tree.size(k) - tree.size(k - 1)
        par = tree.coord_parent(k)
        coo = Wk.tocoo()
        owner = np.asarray(ops.W_parent[k])
        rep["cellularity_violations"] += int(np.count_nonzero((coo.data != 0) & (par[coo.col] != owner[coo.row])))
    for key in ("pi_orthonormality", "W_orthonormality", "W_pi_product", "pibar_identity"):
        vals = list(rep[key].values())
        rep["max_" + key] = max(vals) if vals else 0.0
    rep["dimensions_consistent"] = all(rep["dimension_ok"].values())
    return rep


def save_operators(ops, directory):
    """Write pi_k.mtx, W_k.mtx and a hierarchy.json sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tree = ops.tree
    for k, P in ops.pi.items():
        mm_write(d / f"pi_{k}.mtx", P)
    for k, Wk in ops.W.items():
        mm_write(d / f"W_{k}.mtx", Wk)
    meta = {
        "q": tree.q,
        "level_sizes": list(tree.sizes),
        "J_sizes": {str(k): int(ops.W[k].shape[0]) for k in ops.W},
        "orthonormal": ops.orthonormal,
        "cellular": ops.cellular,
        "parents": {str(k): tree.parent(k).tolist() for k in range(2, tree.q + 1)},
        "leaf_order": tree.leaf_order.tolist(),
        "W_parent": {str(k): np.asarray(v).tolist() for k, v in ops.W_parent.items()},
        "dim": tree.dim,
        "branch": tree.branch,
    }
    (d / "hierarchy.json").write_text(json.dumps(meta, indent=1))


def load_operators(directory):
    """Inverse of :func:`save_operators`."""
    d = Path(directory)
    meta = json.loads((d / "hierarchy.json").read_text())
    q = meta["q"]
    parents = [meta["parents"][str(k)] for k in range(2, q + 1)]
    tree = IndexTree(
        parents,
        root_size=meta["level_sizes"][0],
        leaf_order=meta["leaf_order"],
        dim=meta.get("dim"),
        branch=meta.get("branch"),
    )
    pi = {k: mm_read(d / f"pi_{k}.mtx") for k in range(1, q)}
    W = {k: mm_read(d / f"W_{k}.mtx") for k in range(2, q + 1)}
    W_parent = {k: np.asarray(meta["W_parent"][str(k)], dtype=np.int64) for k in range(2, q + 1)}
    return HierarchyOperators(tree, pi, W, W_parent, orthonormal=meta["orthonormal"], cellular=meta["cellular"])
