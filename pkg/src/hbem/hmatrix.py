"""Hierarchical-matrix compression of boundary operators.

Geometric cluster trees over DOF centers, admissibility-partitioned block
trees, adaptive cross approximation (ACA) of well-separated blocks, and the
compressed assembly loop that routes large row/column jobs to a batched
integrator backend while keeping near-field (singular) blocks dense.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assembly import AssemblyConfig
from .backend import BatchRequest, HostBackend, make_host_backends
from .errors import AssemblyError, ConfigError
from .kernels import (
    IntegrationContext,
    OperatorSpec,
    local_matrix,
    make_integration_context,
)
from .spaces import FunctionSpace

DEFAULT_N_MIN = 32
DEFAULT_ETA = 2.0


# ---------------------------------------------------------------------------
# cluster trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterNode:
    """One node of a binary geometric cluster tree.

    Holds a contiguous index range [start, stop) into the tree ordering and
    the axis-aligned bounding box of the contained DOF centers."""

    start: int
    stop: int
    level: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left < 0

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))


def box_distance(a_min, a_max, b_min, b_max) -> float:
    """Euclidean distance between two axis-aligned boxes (0 if overlapping)."""
    gap = np.maximum(0.0, np.maximum(b_min - a_max, a_min - b_max))
    return float(np.linalg.norm(gap))


@dataclass(frozen=True)
class ClusterTree:
    """Binary cluster tree with contiguous index sets per node.

    permutation[t] is the original DOF index stored at tree position t, so
    concatenating the leaves' ranges enumerates a permutation of 0..n-1."""

    nodes: tuple[ClusterNode, ...]
    permutation: np.ndarray
    n_min: int

    def __post_init__(self):
        perm = np.ascontiguousarray(self.permutation, dtype=np.int64)
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)

    @property
    def n_dofs(self) -> int:
        return len(self.permutation)

    @property
    def root(self) -> ClusterNode:
        return self.nodes[0]

    def leaves(self) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.is_leaf]

    def inverse_permutation(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv


def build_cluster_tree(points: np.ndarray, n_min: int = DEFAULT_N_MIN) -> ClusterTree:
    """Cluster DOF centers by recursive longest-axis median bisection.

    Each split sorts the node's points along the longest bounding-box axis
    and cuts at the median; recursion stops at n_min points per leaf."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ConfigError(f"points must have shape (n, 3), got {pts.shape}")
    n = len(pts)
    if n < 1:
        raise ConfigError("cluster tree needs at least one DOF")
    if n_min < 1:
        raise ConfigError(f"n_min must be >= 1, got {n_min}")

    perm = np.arange(n, dtype=np.int64)
    nodes: list[ClusterNode] = []

    def build(start: int, stop: int, level: int) -> int:
        idx = perm[start:stop]
        sub = pts[idx]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        me = len(nodes)
        nodes.append(ClusterNode(start, stop, level, lo, hi))
        if stop - start > n_min:
            axis = int(np.argmax(hi - lo))
            order = np.argsort(sub[:, axis], kind="stable")
            perm[start:stop] = idx[order]
            mid = start + (stop - start + 1) // 2
            left = build(start, mid, level + 1)
            right = build(mid, stop, level + 1)
            nodes[me] = ClusterNode(start, stop, level, lo, hi, left, right)
        return me

    build(0, n, 0)
    return ClusterTree(tuple(nodes), perm, n_min)


# ---------------------------------------------------------------------------
# block cluster tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockLeaf:
    """A leaf of the block cluster tree: one (row cluster, col cluster) pair."""

    row_node: int
    col_node: int
    admissible: bool


@dataclass(frozen=True)
class BlockClusterTree:
    """Admissibility partition of the row x column index product."""

    rows: ClusterTree
    cols: ClusterTree
    eta: float
    leaves: tuple[BlockLeaf, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.n_dofs, self.cols.n_dofs

    def leaf_shape(self, leaf: BlockLeaf) -> tuple[int, int]:
        return self.rows.nodes[leaf.row_node].size, self.cols.nodes[leaf.col_node].size


def is_admissible(t: ClusterNode, s: ClusterNode, eta: float) -> bool:
    """Standard box admissibility: min(diam t, diam s) <= eta * dist(t, s)."""
    dist = box_distance(t.bbox_min, t.bbox_max, s.bbox_min, s.bbox_max)
    if dist <= 0.0:
        return False
    return min(t.diameter, s.diameter) <= eta * dist


def build_block_tree(
    rows: ClusterTree, cols: ClusterTree, eta: float = DEFAULT_ETA
) -> BlockClusterTree:
    """Partition the matrix into admissible and inadmissible leaf blocks.

    Descends both trees simultaneously: an admissible pair becomes a far
    field leaf, a pair of leaf clusters becomes a near-field (dense) leaf,
    anything else recurses over the children of whichever side still has
    them."""
    if eta < 0.0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    leaves: list[BlockLeaf] = []

    def descend(ti: int, si: int):
        t = rows.nodes[ti]
        s = cols.nodes[si]
        if is_admissible(t, s, eta):
            leaves.append(BlockLeaf(ti, si, True))
            return
        if t.is_leaf and s.is_leaf:
            leaves.append(BlockLeaf(ti, si, False))
            return
        t_kids = (ti,) if t.is_leaf else (t.left, t.right)
        s_kids = (si,) if s.is_leaf else (s.left, s.right)
        for tk in t_kids:
            for sk in s_kids:
                descend(tk, sk)

    descend(0, 0)
    return BlockClusterTree(rows, cols, float(eta), tuple(leaves))


# ---------------------------------------------------------------------------
# adaptive cross approximation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcaConfig:
    """Controls for the cross-approximation loop.

    epsilon : relative stopping tolerance on the next rank-1 update.
    k_max : rank cap; None means min(m, n).
    threshold : minimum element-pair count for which a row/column job is
        sent to a batched backend instead of the host integrator."""

    epsilon: float = 1e-5
    k_max: int | None = None
    threshold: int = 10000

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.k_max is not None and self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if self.threshold < 1:
            raise ConfigError(f"threshold must be >= 1, got {self.threshold}")


@dataclass(frozen=True)
class LowRankBlock:
    """Rank-r factorization A ~= u @ v.T of one matrix block.

    u : (m, r) column factors.
    v : (n, r) row factors (stored transposed, so A ~= u @ v.T).
    residual : last rank-1 update size relative to the accumulated
        Frobenius norm; an upper-bound style convergence indicator.
    converged : stopping tolerance was met.
    exhausted : the pivot search ran out of usable rows first (the
        bookkeeping set Z absorbed every remaining row)."""

    u: np.ndarray
    v: np.ndarray
    rank: int
    residual: float
    converged: bool
    exhausted: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def todense(self) -> np.ndarray:
        return self.u @ self.v.T

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.u @ (self.v.T @ x)


def aca(
    row_fn: Callable[[int], np.ndarray],
    col_fn: Callable[[int], np.ndarray],
    m: int,
    n: int,
    cfg: AcaConfig,
) -> LowRankBlock:
    """Adaptive cross approximation with partial pivoting.

    row_fn(i) and col_fn(j) return entries of the original matrix; the
    residual is tracked implicitly through the accumulated factors.  Row
    pivots start at the first index and follow argmax |u_k| over unused
    rows; rows whose residual vanishes are moved to the set Z and never
    revisited.  Iteration stops once two consecutive rank-1 updates
    u_k v_k^T fall below epsilon times the incrementally updated
    Frobenius norm of the accumulated approximation (a single small
    update can be a fluke of the pivot row, so it only counts as a
    candidate), when rows are exhausted, or at k_max."""
    k_max = min(m, n) if cfg.k_max is None else min(cfg.k_max, m, n)
    us: list[np.ndarray] = []
    vs: list[np.ndarray] = []
    z_rows: set[int] = set()
    used_rows: set[int] = set()
    used_cols: set[int] = set()
    norm2 = 0.0  # ||S_k||_F^2 of the accumulated approximation
    residual = np.inf
    converged = False
    exhausted = False
    small_in_a_row = 0

    def next_unused_row(preference: np.ndarray | None) -> int:
        blocked = z_rows | used_rows
        if len(blocked) >= m:
            return -1
        if preference is None:
            for i in range(m):
                if i not in blocked:
                    return i
            return -1
        order = np.argsort(-np.abs(preference), kind="stable")
        for i in order:
            if int(i) not in blocked:
                return int(i)
        return -1

    i = next_unused_row(None)
    dtype = None
    while len(us) < k_max:
        if i < 0:
            exhausted = True
            converged = True
            break
        row = np.asarray(row_fn(i)).copy()
        if dtype is None:
            dtype = row.dtype
        for u_l, v_l in zip(us, vs):
            row -= u_l[i] * v_l
        # column pivot: largest residual entry in an unused column
        amask = np.abs(row)
        if used_cols:
            amask[list(used_cols)] = -1.0
        j = int(np.argmax(amask))
        pivot = row[j]
        if amask[j] <= 0.0 or pivot == 0:
            # residual row vanished: retire it to Z and try the next row
            z_rows.add(i)
            i = next_unused_row(None)
            continue
        v = row / pivot
        col = np.asarray(col_fn(j)).copy()
        for u_l, v_l in zip(us, vs):
            col -= v_l[j] * u_l
        u = col
        nu = float(np.linalg.norm(u))
        nv = float(np.linalg.norm(v))
        update = nu * nv
        if norm2 > 0.0 and update <= cfg.epsilon * np.sqrt(norm2):
            # negligible update: drop it and retire the row, but only stop
            # once a second consecutive update confirms the tolerance
            residual = update / np.sqrt(norm2)
            small_in_a_row += 1
            if small_in_a_row >= 2:
                converged = True
                break
            z_rows.add(i)
            i = next_unused_row(u)
            continue
        small_in_a_row = 0
        cross = 0.0
        for u_l, v_l in zip(us, vs):
            cross += np.real(np.vdot(u_l, u) * np.vdot(v_l, v))
        norm2 += 2.0 * cross + update * update
        us.append(u)
        vs.append(v)
        used_rows.add(i)
        used_cols.add(j)
        if norm2 > 0.0:
            residual = update / np.sqrt(norm2)
            if update <= cfg.epsilon * np.sqrt(norm2):
                small_in_a_row = 1
        i = next_unused_row(u)

    if not us:
        dtype = dtype if dtype is not None else np.float64
        u_mat = np.zeros((m, 0), dtype=dtype)
        v_mat = np.zeros((n, 0), dtype=dtype)
        return LowRankBlock(u_mat, v_mat, 0, 0.0, converged, exhausted)
    u_mat = np.stack(us, axis=1)
    v_mat = np.stack(vs, axis=1)
    return LowRankBlock(
        u_mat, v_mat, len(us), float(residual), converged, exhausted
    )


# ---------------------------------------------------------------------------
# compressed assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseBlock:
    """Explicitly stored near-field block."""

    a: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    def todense(self) -> np.ndarray:
        return self.a

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.a @ x


@dataclass(frozen=True)
class HMatrix:
    """Hierarchical matrix: block tree plus one payload per leaf."""

    tree: BlockClusterTree
    payloads: tuple
    spec: OperatorSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.tree.shape

    @property
    def dtype(self) -> np.dtype:
        return self.spec.result_dtype

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return hmat_matvec(self, x)

    def to_dense(self) -> np.ndarray:
        """Expand to a dense matrix in the original DOF ordering."""
        m, n = self.shape
        out = np.zeros((m, n), dtype=self.dtype)
        rp = self.tree.rows.permutation
        cp = self.tree.cols.permutation
        for leaf, payload in zip(self.tree.leaves, self.payloads):
            rnode = self.tree.rows.nodes[leaf.row_node]
            cnode = self.tree.cols.nodes[leaf.col_node]
            rows = rp[rnode.start : rnode.stop]
            cols = cp[cnode.start : cnode.stop]
            out[np.ix_(rows, cols)] = payload.todense()
        return out


def hmat_matvec(h: HMatrix, x: np.ndarray) -> np.ndarray:
    """y = H x in the original DOF ordering.

    Leaves are applied sequentially in a fixed (row, column) order, so the
    result is reproducible bit for bit between calls."""
    m, n = h.shape
    x = np.asarray(x)
    if x.shape != (n,):
        raise AssemblyError(f"matvec expects a vector of length {n}, got {x.shape}")
    rows = h.tree.rows
    cols = h.tree.cols
    xt = x[cols.permutation]
    yt = np.zeros(m, dtype=np.result_type(h.dtype, x.dtype))
    order = sorted(
        range(len(h.tree.leaves)),
        key=lambda ix: (
            rows.nodes[h.tree.leaves[ix].row_node].start,
            cols.nodes[h.tree.leaves[ix].col_node].start,
        ),
    )
    for ix in order:
        leaf = h.tree.leaves[ix]
        rnode = rows.nodes[leaf.row_node]
        cnode = cols.nodes[leaf.col_node]
        yt[rnode.start : rnode.stop] += h.payloads[ix].matvec(
            xt[cnode.start : cnode.stop]
        )
    y = np.empty_like(yt)
    y[rows.permutation] = yt
    return y


@dataclass(frozen=True)
class CompressionStats:
    """Storage accounting for an assembled hierarchical matrix."""

    stored_entries: int
    dense_entries: int
    ratio: float
    rank_histogram: dict
    n_dense_leaves: int
    n_lowrank_leaves: int


def compression_stats(h: HMatrix) -> CompressionStats:
    """Count stored entries against the dense-equivalent count."""
    stored = 0
    hist: dict[int, int] = {}
    n_dense = 0
    n_low = 0
    for leaf, payload in zip(h.tree.leaves, h.payloads):
        m, n = h.tree.leaf_shape(leaf)
        if isinstance(payload, LowRankBlock):
            stored += payload.rank * (m + n)
            hist[payload.rank] = hist.get(payload.rank, 0) + 1
            n_low += 1
        else:
            stored += m * n
            n_dense += 1
    m, n = h.shape
    dense = m * n
    return CompressionStats(stored, dense, stored / dense, hist, n_dense, n_low)


# ---------------------------------------------------------------------------
# assembly internals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Incidence:
    """CSR map from a global DOF to (element, local index) memberships."""

    indptr: np.ndarray
    elements: np.ndarray
    local: np.ndarray

    def of(self, dof: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[dof], self.indptr[dof + 1]
        return self.elements[lo:hi], self.local[lo:hi]

    def union_elements(self, dofs: np.ndarray) -> np.ndarray:
        chunks = [
            self.elements[self.indptr[d] : self.indptr[d + 1]] for d in dofs
        ]
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(chunks))


def _dof_incidence(space: FunctionSpace) -> _Incidence:
    dm = space.dofmap
    n_elem, nloc = dm.shape
    flat_dof = dm.ravel()
    flat_elem = np.repeat(np.arange(n_elem, dtype=np.int64), nloc)
    flat_local = np.tile(np.arange(nloc, dtype=np.int64), n_elem)
    order = np.argsort(flat_dof, kind="stable")
    counts = np.bincount(flat_dof, minlength=space.n_dofs)
    indptr = np.zeros(space.n_dofs + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return _Incidence(indptr, flat_elem[order], flat_local[order])


def _touching_mask(elements: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    ea = elements[pairs[:, 0]]
    eb = elements[pairs[:, 1]]
    return (ea[:, :, None] == eb[:, None, :]).any(axis=(1, 2))


class _LeafAssembler:
    """Shared state for assembling the leaves of one hierarchical matrix."""

    def __init__(
        self,
        ctx: IntegrationContext,
        tree: BlockClusterTree,
        cfg: AcaConfig,
        backends: Sequence[HostBackend],
        host: HostBackend,
    ):
        self.ctx = ctx
        self.tree = tree
        self.cfg = cfg
        self.backends = list(backends)
        self.host = host
        self.spec = ctx.spec
        self.dtype = ctx.spec.result_dtype
        self.mesh = ctx.mesh
        self.row_inc = _dof_incidence(ctx.test_space)
        self.col_inc = _dof_incidence(ctx.trial_space)
        self.row_ids = tree.rows.permutation
        self.col_ids = tree.cols.permutation
        self.row_inv = tree.rows.inverse_permutation()
        self.col_inv = tree.cols.inverse_permutation()
        self.counters = {
            "host_jobs": 0,
            "backend_jobs": 0,
            "singular_pairs": 0,
            "aca_converged": 0,
            "aca_exhausted": 0,
            "aca_fallback_dense": 0,
            "dense_leaves": 0,
            "lowrank_leaves": 0,
        }
        self._lock = threading.Lock()

    def count(self, key: str, n: int = 1):
        with self._lock:
            self.counters[key] += n

    # -- pair integration ---------------------------------------------------

    def _integrate_pairs(
        self, pairs: np.ndarray, backend: HostBackend
    ) -> np.ndarray:
        """(p, nt, ns) local blocks for arbitrary pairs; singular pairs take
        the host quadrature path, the disjoint bulk goes through a batched
        integrator (the given backend when large enough, else the host)."""
        nt = self.ctx.test_table.values.shape[0]
        ns = self.ctx.trial_table.values.shape[0]
        out = np.zeros((len(pairs), nt, ns), dtype=self.dtype)
        if len(pairs) == 0:
            return out
        touching = _touching_mask(self.mesh.elements, pairs)
        reg_idx = np.nonzero(~touching)[0]
        if len(reg_idx) > 0:
            reg_pairs = pairs[reg_idx]
            if len(reg_pairs) >= self.cfg.threshold and self.backends:
                self.count("backend_jobs")
                buf = backend.integrate_batch(BatchRequest(reg_pairs))
            else:
                self.count("host_jobs")
                buf = self.host.integrate_batch(BatchRequest(reg_pairs))
            out[reg_idx] = buf.complex_view() if self.spec.is_complex else buf.re
        sing_idx = np.nonzero(touching)[0]
        for p in sing_idx:
            a, b = int(pairs[p, 0]), int(pairs[p, 1])
            out[p] = local_matrix(self.ctx, a, b)
        if len(sing_idx):
            self.count("singular_pairs", len(sing_idx))
        return out

    # -- ACA row/column jobs ------------------------------------------------

    def _row_job(
        self,
        dof: int,
        col_elems: np.ndarray,
        c0: int,
        width: int,
        backend: HostBackend,
    ) -> np.ndarray:
        """One matrix row restricted to a column cluster: sum local
        contributions over (elements containing the row DOF) x (elements
        touching the column cluster)."""
        t_elems, t_local = self.row_inc.of(dof)
        pairs = np.empty((len(t_elems) * len(col_elems), 2), dtype=np.int64)
        pairs[:, 0] = np.repeat(t_elems, len(col_elems))
        pairs[:, 1] = np.tile(col_elems, len(t_elems))
        blocks = self._integrate_pairs(pairs, backend)
        p = len(pairs)
        loc = np.repeat(t_local, len(col_elems))
        rows_vals = blocks[np.arange(p), loc, :]  # (p, ns)
        cols_global = self.ctx.trial_space.dofmap[pairs[:, 1]]  # (p, ns)
        cols_local = self.col_inv[cols_global] - c0
        valid = (cols_local >= 0) & (cols_local < width)
        row = np.zeros(width, dtype=self.dtype)
        np.add.at(row, cols_local[valid], rows_vals[valid])
        return row

    def _col_job(
        self,
        dof: int,
        row_elems: np.ndarray,
        r0: int,
        height: int,
        backend: HostBackend,
    ) -> np.ndarray:
        s_elems, s_local = self.col_inc.of(dof)
        pairs = np.empty((len(row_elems) * len(s_elems), 2), dtype=np.int64)
        pairs[:, 0] = np.repeat(row_elems, len(s_elems))
        pairs[:, 1] = np.tile(s_elems, len(row_elems))
        blocks = self._integrate_pairs(pairs, backend)
        p = len(pairs)
        loc = np.tile(s_local, len(row_elems))
        col_vals = blocks[np.arange(p), :, loc]  # (p, nt)
        rows_global = self.ctx.test_space.dofmap[pairs[:, 0]]  # (p, nt)
        rows_local = self.row_inv[rows_global] - r0
        valid = (rows_local >= 0) & (rows_local < height)
        col = np.zeros(height, dtype=self.dtype)
        np.add.at(col, rows_local[valid], col_vals[valid])
        return col

    # -- leaf assembly ------------------------------------------------------

    def dense_leaf(self, leaf: BlockLeaf, backend: HostBackend) -> DenseBlock:
        rnode = self.tree.rows.nodes[leaf.row_node]
        cnode = self.tree.cols.nodes[leaf.col_node]
        r0, height = rnode.start, rnode.size
        c0, width = cnode.start, cnode.size
        row_dofs = self.row_ids[r0 : rnode.stop]
        col_dofs = self.col_ids[c0 : cnode.stop]
        t_elems = self.row_inc.union_elements(row_dofs)
        s_elems = self.col_inc.union_elements(col_dofs)
        pairs = np.empty((len(t_elems) * len(s_elems), 2), dtype=np.int64)
        pairs[:, 0] = np.repeat(t_elems, len(s_elems))
        pairs[:, 1] = np.tile(s_elems, len(t_elems))
        blocks = self._integrate_pairs(pairs, backend)
        rows_global = self.ctx.test_space.dofmap[pairs[:, 0]]  # (p, nt)
        cols_global = self.ctx.trial_space.dofmap[pairs[:, 1]]  # (p, ns)
        rows_local = self.row_inv[rows_global] - r0
        cols_local = self.col_inv[cols_global] - c0
        rv = (rows_local >= 0) & (rows_local < height)
        cv = (cols_local >= 0) & (cols_local < width)
        mask = rv[:, :, None] & cv[:, None, :]
        lin = rows_local[:, :, None] * width + cols_local[:, None, :]
        a = np.zeros((height, width), dtype=self.dtype)
        np.add.at(a.ravel(), lin[mask], blocks[mask])
        return DenseBlock(a)

    def lowrank_leaf(self, leaf: BlockLeaf, backend: HostBackend):
        rnode = self.tree.rows.nodes[leaf.row_node]
        cnode = self.tree.cols.nodes[leaf.col_node]
        r0, height = rnode.start, rnode.size
        c0, width = cnode.start, cnode.size
        row_dofs = self.row_ids[r0 : rnode.stop]
        col_dofs = self.col_ids[c0 : cnode.stop]
        col_elems = self.col_inc.union_elements(col_dofs)
        row_elems = self.row_inc.union_elements(row_dofs)

        def row_fn(i: int) -> np.ndarray:
            return self._row_job(
                int(row_dofs[i]), col_elems, c0, width, backend
            )

        def col_fn(j: int) -> np.ndarray:
            return self._col_job(
                int(col_dofs[j]), row_elems, r0, height, backend
            )

        block = aca(row_fn, col_fn, height, width, self.cfg)
        if block.exhausted:
            self.count("aca_exhausted")
        if block.converged:
            self.count("aca_converged")
            if block.rank * (height + width) < height * width:
                return block
            # compression did not pay off; keep the exact expansion
            return DenseBlock(block.todense())
        # rank cap hit without convergence: store densely, row by row
        self.count("aca_fallback_dense")
        a = np.empty((height, width), dtype=self.dtype)
        for i in range(height):
            a[i] = row_fn(i)
        return DenseBlock(a)

    def assemble_leaf(self, index: int):
        leaf = self.tree.leaves[index]
        backend = self.backends[index % len(self.backends)] if self.backends else self.host
        try:
            if leaf.admissible:
                payload = self.lowrank_leaf(leaf, backend)
            else:
                payload = self.dense_leaf(leaf, backend)
        except Exception as exc:
            rnode = self.tree.rows.nodes[leaf.row_node]
            cnode = self.tree.cols.nodes[leaf.col_node]
            raise AssemblyError(
                f"block rows [{rnode.start}, {rnode.stop}) x "
                f"cols [{cnode.start}, {cnode.stop}) failed: {exc}"
            ) from exc
        if isinstance(payload, LowRankBlock):
            self.count("lowrank_leaves")
        else:
            self.count("dense_leaves")
        return payload


def assemble_hmatrix(
    spec: OperatorSpec,
    test_space: FunctionSpace,
    trial_space: FunctionSpace,
    block_tree: BlockClusterTree,
    cfg: AcaConfig | None = None,
    backends: Sequence[HostBackend] | None = None,
    assembly_config: AssemblyConfig | None = None,
    stats: dict | None = None,
) -> HMatrix:
    """Assemble a boundary operator in hierarchical low-rank form.

    Inadmissible leaves (which contain all singular element pairs) are
    assembled densely on the host; admissible leaves are compressed with
    ACA whose row/column jobs are routed to a batched backend whenever
    they involve at least cfg.threshold element pairs.  Backends are
    handed out round-robin per leaf, and leaves are processed by an
    independent worker pool."""
    cfg = cfg if cfg is not None else AcaConfig()
    acfg = assembly_config if assembly_config is not None else AssemblyConfig()
    if block_tree.shape != (test_space.n_dofs, trial_space.n_dofs):
        raise ConfigError(
            f"block tree shape {block_tree.shape} does not match spaces "
            f"({test_space.n_dofs}, {trial_space.n_dofs})"
        )
    ctx = make_integration_context(
        spec,
        test_space,
        trial_space,
        regular_order=acfg.regular_order,
        singular_base_order=acfg.singular_base_order,
    )
    host = make_host_backends(ctx, 1)[0]
    backends = list(backends) if backends else []
    for b in backends:
        if b.context.spec != spec:
            raise ConfigError(
                "backend was initialized for a different operator spec"
            )
    asm = _LeafAssembler(ctx, block_tree, cfg, backends, host)
    n_leaves = len(block_tree.leaves)
    payloads: list = [None] * n_leaves
    if acfg.workers <= 1:
        for ix in range(n_leaves):
            payloads[ix] = asm.assemble_leaf(ix)
    else:
        with ThreadPoolExecutor(max_workers=acfg.workers) as pool:
            futures = {pool.submit(asm.assemble_leaf, ix): ix for ix in range(n_leaves)}
            for fut, ix in futures.items():
                payloads[ix] = fut.result()
    if stats is not None:
        stats.update(asm.counters)
    return HMatrix(block_tree, tuple(payloads), spec)


def cluster_trees_for(
    test_space: FunctionSpace,
    trial_space: FunctionSpace,
    n_min: int = DEFAULT_N_MIN,
    eta: float = DEFAULT_ETA,
) -> BlockClusterTree:
    """Convenience: cluster both spaces' DOF centers and build a block tree."""
    rows = build_cluster_tree(test_space.dof_centers, n_min)
    if trial_space is test_space:
        cols = rows
    else:
        cols = build_cluster_tree(trial_space.dof_centers, n_min)
    return build_block_tree(rows, cols, eta)
