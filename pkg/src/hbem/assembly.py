"""Dense Galerkin assembly through the batched integration pipeline.

The full test x trial element-pair space is swept in fixed-size chunks.
Touching pairs are integrated once up front on the host with the
regularising rules and cached; every chunk then sends only its disjoint
pairs to a batched-integrator device and merges the cached singular
blocks afterwards, so no entry is ever double-counted and device kernels
never see a singular pair.  With several devices the pair space is split
into one contiguous range per device.  Chunk integration can be
overlapped with the scatter of the previous chunk (double buffering);
scatter into shared matrix rows is serialised by a striped lock table.

With a single device the scatter order is fixed by the chunk sequence,
so results are bitwise reproducible for any worker count; across devices
only the accumulation order of overlapping linear-basis entries changes.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend import BatchRequest, HostBackend
from .errors import AssemblyError, CapacityError, ConfigError
from .kernels import IntegrationContext, OperatorSpec, local_matrix, make_integration_context
from .mesh import TriangleMesh
from .spaces import Family, FunctionSpace


@dataclass(frozen=True)
class AssemblyConfig:
    """Knobs of the assembly pipeline.

    chunk_size : element pairs per pipeline chunk.
    workers : integration threads; 1 means fully synchronous.
    regular_order : triangle rule order for disjoint pairs.
    singular_base_order : Gauss order per dimension of the singular rules.
    devices : use only the first n of the provided backends (None = all).
    max_matrix_bytes : refuse dense allocations beyond this size.
    lock_stripes : granularity of the scatter lock table.
    """

    chunk_size: int = 1 << 20
    workers: int = 1
    regular_order: int = 4
    singular_base_order: int = 4
    devices: int | None = None
    max_matrix_bytes: int = 4 << 30
    lock_stripes: int = 1024

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be positive, got {self.chunk_size}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")
        if self.devices is not None and self.devices < 1:
            raise ConfigError(f"devices must be positive when set, got {self.devices}")
        if self.lock_stripes < 1:
            raise ConfigError(f"lock_stripes must be positive, got {self.lock_stripes}")


def split_work(total: int, parts: int) -> list[tuple[int, int]]:
    """Split range(total) into contiguous near-equal ranges, sizes differing
    by at most one, larger ranges first."""
    if parts < 1:
        raise ConfigError(f"parts must be positive, got {parts}")
    base, rem = divmod(total, parts)
    ranges = []
    start = 0
    for p in range(parts):
        size = base + (1 if p < rem else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


def element_neighbors(mesh: TriangleMesh) -> list[np.ndarray]:
    """For each element, the sorted array of elements sharing at least one
    vertex with it (itself included)."""
    v2e: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for e, tri in enumerate(mesh.elements):
        for v in tri:
            v2e[v].append(e)
    out = []
    for tri in mesh.elements:
        partners = set()
        for v in tri:
            partners.update(v2e[v])
        out.append(np.fromiter(sorted(partners), dtype=np.int64))
    return out


class _StripeLocks:
    """Striped per-entry exclusion for scatter-adds.

    Entry e maps to stripe e * n // total; a writer acquires the stripe
    range covering its entries in ascending order, which guarantees both
    exclusion per entry and deadlock freedom."""

    def __init__(self, n_stripes: int, total_entries: int):
        self.n = n_stripes
        self.total = max(total_entries, 1)
        self._locks = [threading.Lock() for _ in range(n_stripes)]

    def stripe_range(self, lo_entry: int, hi_entry: int) -> range:
        lo = lo_entry * self.n // self.total
        hi = hi_entry * self.n // self.total
        return range(lo, hi + 1)

    def acquire(self, stripes: range):
        for s in stripes:
            self._locks[s].acquire()

    def release(self, stripes: range):
        for s in reversed(stripes):
            self._locks[s].release()


@dataclass
class _Plan:
    """Shared immutable state of one assembly run."""

    ctx: IntegrationContext
    config: AssemblyConfig
    rows: np.ndarray            # (m, nt) global row per element-local test dof
    cols: np.ndarray            # (m, ns) global col per element-local trial dof
    n_cols: int
    assign_scatter: bool        # True when every entry belongs to one pair
    singular_linear: np.ndarray  # sorted linear pair ids with a singular block
    singular_blocks: dict[tuple[int, int], np.ndarray]
    locks: _StripeLocks
    counters: dict = field(default_factory=dict)
    counter_lock: threading.Lock = field(default_factory=threading.Lock)

    def count(self, key: str, n: int = 1):
        with self.counter_lock:
            self.counters[key] += n


def _singular_cache(ctx: IntegrationContext, dtype) -> tuple[np.ndarray, dict]:
    mesh = ctx.mesh
    m = mesh.n_elements
    neighbors = element_neighbors(mesh)
    blocks: dict[tuple[int, int], np.ndarray] = {}
    linear = []
    for a in range(m):
        for b in neighbors[a]:
            blocks[(a, int(b))] = local_matrix(ctx, a, int(b)).astype(dtype, copy=False)
            linear.append(a * m + int(b))
    return np.asarray(linear, dtype=np.int64), blocks


def _scatter(plan: _Plan, A: np.ndarray, a: np.ndarray, b: np.ndarray, vals: np.ndarray):
    """Accumulate (p, nt, ns) blocks of pairs (a, b) into A."""
    if len(a) == 0:
        return
    rows = plan.rows[a]
    cols = plan.cols[b]
    linear = (rows[:, :, None] * plan.n_cols + cols[:, None, :]).ravel()
    flat_vals = vals.reshape(len(a), -1).ravel()
    flat = A.reshape(-1)
    if plan.assign_scatter:
        # one pair per entry: plain stores, race-free without locks
        flat[linear] = flat_vals
        return
    stripes = plan.locks.stripe_range(int(linear.min()), int(linear.max()))
    plan.locks.acquire(stripes)
    try:
        np.add.at(flat, linear, flat_vals)
    finally:
        plan.locks.release(stripes)


def _chunk_meta(plan: _Plan, c0: int, c1: int):
    """Split one linear chunk into regular pairs and cached singular pairs."""
    m_cols = plan.ctx.mesh.n_elements
    lin = np.arange(c0, c1, dtype=np.int64)
    i0, i1 = np.searchsorted(plan.singular_linear, [c0, c1])
    sing_lin = plan.singular_linear[i0:i1]
    mask = np.zeros(c1 - c0, dtype=bool)
    mask[sing_lin - c0] = True
    reg = lin[~mask]
    return np.column_stack([reg // m_cols, reg % m_cols]), sing_lin


def _merge_chunk(plan: _Plan, A: np.ndarray, reg_pairs: np.ndarray,
                 buffer, sing_lin: np.ndarray):
    if len(reg_pairs):
        _scatter(plan, A, reg_pairs[:, 0], reg_pairs[:, 1], buffer.complex_view())
    if len(sing_lin):
        m_cols = plan.ctx.mesh.n_elements
        sa = sing_lin // m_cols
        sb = sing_lin % m_cols
        vals = np.stack([plan.singular_blocks[(int(x), int(y))] for x, y in zip(sa, sb)])
        _scatter(plan, A, sa, sb, vals)
        plan.count("singular_merged", len(sing_lin))
    plan.count("chunks_done")


def _run_device(plan: _Plan, A: np.ndarray, backend, lo: int, hi: int,
                pool: ThreadPoolExecutor | None, errors: list):
    try:
        chunk = plan.config.chunk_size
        pending = None
        for c0 in range(lo, hi, chunk):
            c1 = min(hi, c0 + chunk)
            reg_pairs, sing_lin = _chunk_meta(plan, c0, c1)
            request = BatchRequest(pairs=reg_pairs)
            if pool is not None:
                fut = pool.submit(backend.integrate_batch, request)
            else:
                fut = None
            if pending is not None:
                _merge_chunk(plan, A, *pending)
            if fut is None:
                buffer = backend.integrate_batch(request)
            else:
                buffer = fut.result()  # pipeline barrier
            pending = (reg_pairs, buffer, sing_lin)
            plan.count("batches")
        if pending is not None:
            _merge_chunk(plan, A, *pending)
    except Exception as exc:  # noqa: BLE001 - reported to the caller thread
        errors.append(AssemblyError(
            f"device {getattr(backend, 'device_id', '?')} failed on pair range "
            f"[{lo}, {hi}): {exc}"
        ))


def assemble_dense(
    spec: OperatorSpec,
    test_space: FunctionSpace,
    trial_space: FunctionSpace,
    config: AssemblyConfig,
    backends: Sequence,
    stats: dict | None = None,
) -> np.ndarray:
    """Assemble one boundary operator densely.

    backends is a non-empty sequence of batched integrators (HostBackend
    or compatible) already initialised for this operator and mesh.
    Returns the (n_test_dofs, n_trial_dofs) matrix in the spec's result
    dtype; per-run instrumentation lands in the optional stats dict."""
    if not backends:
        raise ConfigError("assemble_dense requires at least one backend")
    use = list(backends[: config.devices] if config.devices else backends)
    for be in use:
        be_spec = getattr(getattr(be, "context", None), "spec", None)
        if be_spec is not None and be_spec != spec:
            raise AssemblyError(f"backend {be!r} was initialised for {be_spec}, not {spec}")

    ctx = make_integration_context(spec, test_space, trial_space,
                                   config.regular_order, config.singular_base_order)
    dtype = spec.result_dtype
    n_rows, n_cols = test_space.n_dofs, trial_space.n_dofs
    need = n_rows * n_cols * dtype.itemsize
    if need > config.max_matrix_bytes:
        raise CapacityError(
            f"dense {n_rows} x {n_cols} matrix needs {need:,} bytes, "
            f"config allows {config.max_matrix_bytes:,}"
        )
    A = np.zeros((n_rows, n_cols), dtype=dtype)

    singular_linear, singular_blocks = _singular_cache(ctx, dtype)
    assign_scatter = (test_space.family is Family.P0
                      and trial_space.family is Family.P0)
    plan = _Plan(
        ctx=ctx,
        config=config,
        rows=test_space.dofmap,
        cols=trial_space.dofmap,
        n_cols=n_cols,
        assign_scatter=assign_scatter,
        singular_linear=singular_linear,
        singular_blocks=singular_blocks,
        locks=_StripeLocks(config.lock_stripes, n_rows * n_cols),
        counters={"singular_merged": 0, "chunks_done": 0, "batches": 0},
    )

    m = ctx.mesh.n_elements
    total = m * m
    ranges = split_work(total, len(use))
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    errors: list[Exception] = []
    try:
        if len(use) == 1:
            _run_device(plan, A, use[0], *ranges[0], pool, errors)
        else:
            threads = [
                threading.Thread(target=_run_device,
                                 args=(plan, A, be, lo, hi, pool, errors),
                                 name=f"assembly-dev{i}")
                for i, (be, (lo, hi)) in enumerate(zip(use, ranges))
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if errors:
        raise errors[0]

    if stats is not None:
        stats.update(plan.counters)
        stats.update({
            "pairs_total": total,
            "pairs_singular": len(singular_linear),
            "pairs_regular": total - len(singular_linear),
            "devices_used": len(use),
            "matrix_bytes": need,
        })
    return A


def assemble_dense_reference(
    spec: OperatorSpec,
    test_space: FunctionSpace,
    trial_space: FunctionSpace,
    config: AssemblyConfig | None = None,
) -> np.ndarray:
    """Baseline dense assembly: every element pair integrated one at a time.

    Deliberately unbatched -- this is the per-pair path that benchmark
    speed-up figures compare the batched pipeline against.  Identical
    quadrature to assemble_dense, so the two agree to accumulation-order
    roundoff."""
    config = config if config is not None else AssemblyConfig()
    ctx = make_integration_context(spec, test_space, trial_space,
                                   config.regular_order, config.singular_base_order)
    dtype = spec.result_dtype
    A = np.zeros((test_space.n_dofs, trial_space.n_dofs), dtype=dtype)
    rows = test_space.dofmap
    cols = trial_space.dofmap
    m = ctx.mesh.n_elements
    for a in range(m):
        ra = rows[a][:, None]
        for b in range(m):
            A[ra, cols[b][None, :]] += local_matrix(ctx, a, b)
    return A
