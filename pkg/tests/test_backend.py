from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hbem.backend import (
    MAX_WEIGHTS,
    BatchRequest,
    HostBackend,
    RawResultBuffer,
    init_device,
    integrate_batch,
    make_host_backends,
)
from hbem.errors import CapacityError, ContractViolationError
from hbem.kernels import OperatorSpec, local_matrix
from hbem.mesh import precompute_geometry
from hbem.quadrature import QuadratureRule, regular_rule
from hbem.spaces import evaluate_basis


def random_disjoint_pairs(mesh, n, rng):
    """Rejection-sample n test/trial pairs with no shared vertices."""
    out = []
    conn = mesh.elements
    while len(out) < n:
        cand = rng.integers(0, mesh.n_elements, size=(4 * (n - len(out)), 2))
        ea, eb = conn[cand[:, 0]], conn[cand[:, 1]]
        ok = ~(ea[:, :, None] == eb[:, None, :]).any(axis=(1, 2))
        out.extend(map(tuple, cand[ok]))
    return np.array(out[:n], dtype=np.int64)


@pytest.fixture(scope="module")
def device_ctx(ctx_of):
    ctx = ctx_of(1, "p0", "laplace", "slp")
    return make_host_backends(ctx)[0].context


@pytest.fixture(scope="module")
def split_ctx_cache(ctx_of):
    ctx = ctx_of(1, "p0", "laplace", "slp")
    backend = make_host_backends(ctx)[0]
    pairs = random_disjoint_pairs(ctx.mesh, 100, np.random.default_rng(7))
    whole = backend.integrate_batch(BatchRequest(pairs=pairs)).re
    return backend, pairs, whole


class TestInitDevice:
    def test_rule_beyond_weight_capacity(self, sphere):
        mesh = sphere(0)
        pts = np.vstack([[1 / 3, 1 / 3],
                         [[p[1], p[2]] for p in
                          {(0.6, 0.3, 0.1), (0.6, 0.1, 0.3), (0.3, 0.6, 0.1),
                           (0.3, 0.1, 0.6), (0.1, 0.6, 0.3), (0.1, 0.3, 0.6)}]])
        wts = np.array([0.05] + [0.075] * 6)
        rule = QuadratureRule(points=pts, weights=wts, order=1)
        assert len(rule) == MAX_WEIGHTS + 1
        geom = precompute_geometry(mesh, rule)
        table = evaluate_basis("p0", rule.points)
        with pytest.raises(CapacityError, match="7 weights"):
            init_device(mesh, geom, (table, table), rule.weights,
                        OperatorSpec("laplace", "slp"))

    def test_weight_count_mismatch(self, sphere):
        mesh = sphere(0)
        rule = regular_rule(4)
        geom = precompute_geometry(mesh, rule)
        table = evaluate_basis("p0", rule.points)
        with pytest.raises(CapacityError):
            init_device(mesh, geom, (table, table), rule.weights[:-1],
                        OperatorSpec("laplace", "slp"))

    def test_table_point_count_mismatch(self, sphere):
        mesh = sphere(0)
        rule = regular_rule(4)
        geom = precompute_geometry(mesh, rule)
        short = evaluate_basis("p0", regular_rule(1).points)
        with pytest.raises(CapacityError):
            init_device(mesh, geom, (short, short), rule.weights,
                        OperatorSpec("laplace", "slp"))

    def test_context_arrays_read_only(self, device_ctx):
        for name in ("qpoints", "normals", "jacobians", "weights",
                     "test_values", "trial_values"):
            assert not getattr(device_ctx, name).flags.writeable

    def test_make_host_backends(self, ctx_of):
        ctx = ctx_of(0, "p0", "laplace", "slp")
        backends = make_host_backends(ctx, n_devices=3)
        assert [b.device_id for b in backends] == [0, 1, 2]
        assert len({id(b.context) for b in backends}) == 3
        with pytest.raises(CapacityError):
            make_host_backends(ctx, n_devices=0)


class TestBatchRequest:
    def test_shape_validation(self):
        with pytest.raises(ContractViolationError):
            BatchRequest(pairs=np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(ContractViolationError):
            BatchRequest(pairs=np.zeros(4, dtype=np.int64))

    def test_offsets_validation(self):
        pairs = np.array([[0, 5], [1, 6]])
        with pytest.raises(ContractViolationError):
            BatchRequest(pairs=pairs, offsets=np.array([1, 2, 3]))

    def test_arrays_frozen(self):
        req = BatchRequest(pairs=np.array([[0, 5]]), offsets=np.array([7]))
        assert not req.pairs.flags.writeable
        assert not req.offsets.flags.writeable
        assert len(req) == 1


class TestIntegrateBatch:
    def test_non_disjoint_rejected(self, device_ctx, sphere):
        with pytest.raises(ContractViolationError, match="not disjoint"):
            integrate_batch(device_ctx, BatchRequest(pairs=np.array([[3, 3]])))
        mesh = sphere(1)
        shared = next((a, b) for a in range(4) for b in range(mesh.n_elements)
                      if a != b
                      and set(mesh.elements[a]) & set(mesh.elements[b]))
        with pytest.raises(ContractViolationError, match="not disjoint"):
            integrate_batch(device_ctx, BatchRequest(pairs=np.array([shared])))

    def test_out_of_range_rejected(self, device_ctx):
        n = device_ctx.n_elements
        with pytest.raises(ContractViolationError, match="indices"):
            integrate_batch(device_ctx, BatchRequest(pairs=np.array([[0, n]])))
        with pytest.raises(ContractViolationError, match="indices"):
            integrate_batch(device_ctx, BatchRequest(pairs=np.array([[-1, 4]])))

    def test_empty_batch(self, device_ctx):
        res = integrate_batch(device_ctx, BatchRequest(pairs=np.zeros((0, 2), int)))
        assert len(res) == 0
        assert res.re.shape == (0, 1, 1)

    def test_single_pair_matches_local_matrix(self, ctx_of, device_ctx, rng):
        ctx = ctx_of(1, "p0", "laplace", "slp")
        pairs = random_disjoint_pairs(ctx.mesh, 1, rng)
        res = integrate_batch(device_ctx, BatchRequest(pairs=pairs))
        direct = local_matrix(ctx, int(pairs[0, 0]), int(pairs[0, 1]))
        assert np.max(np.abs(res.block(0) - direct)) <= 1e-12 * np.abs(direct).max()

    @pytest.mark.parametrize("equation,k", [("laplace", 0.0), ("helmholtz", 2.0)])
    def test_bulk_pairs_match_per_pair_path(self, ctx_of, rng, equation, k):
        ctx = ctx_of(1, "p0", equation, "slp", k=k)
        backend = make_host_backends(ctx)[0]
        pairs = random_disjoint_pairs(ctx.mesh, 300, rng)
        res = backend.integrate_batch(BatchRequest(pairs=pairs))
        worst = 0.0
        for p, (a, b) in enumerate(pairs):
            direct = local_matrix(ctx, int(a), int(b))
            scale = np.abs(direct).max()
            worst = max(worst, np.abs(res.block(p) - direct).max() / scale)
        assert worst <= 1e-12

    def test_identical_contexts_identical_bits(self, ctx_of, rng):
        ctx = ctx_of(1, "p0", "helmholtz", "dlp", k=2.0)
        b0, b1 = make_host_backends(ctx, n_devices=2)
        req = BatchRequest(pairs=random_disjoint_pairs(ctx.mesh, 100, rng))
        r0, r1 = b0.integrate_batch(req), b1.integrate_batch(req)
        assert np.array_equal(r0.re, r1.re)
        assert np.array_equal(r0.im, r1.im)

    def test_stride_does_not_change_bits(self, ctx_of, rng):
        ctx = ctx_of(1, "p0", "laplace", "slp")
        req = BatchRequest(pairs=random_disjoint_pairs(ctx.mesh, 100, rng))
        wide = make_host_backends(ctx, stride=4096)[0].integrate_batch(req)
        narrow = make_host_backends(ctx, stride=7)[0].integrate_batch(req)
        assert np.array_equal(wide.re, narrow.re)

    def test_batch_split_bit_exact(self, ctx_of, rng):
        ctx = ctx_of(1, "p0", "helmholtz", "slp", k=2.0)
        backend = make_host_backends(ctx)[0]
        pairs = random_disjoint_pairs(ctx.mesh, 200, rng)
        whole = backend.integrate_batch(BatchRequest(pairs=pairs))
        cuts = [0, *sorted(rng.integers(1, 200, size=5)), 200]
        parts = [backend.integrate_batch(BatchRequest(pairs=pairs[lo:hi]))
                 for lo, hi in zip(cuts[:-1], cuts[1:])]
        assert np.array_equal(whole.re, np.concatenate([p.re for p in parts]))
        assert np.array_equal(whole.im, np.concatenate([p.im for p in parts]))

    @given(st.lists(st.integers(1, 99), max_size=4))
    def test_split_points_never_matter(self, ctx_of, split_ctx_cache, raw_pairs):
        backend, pairs, whole = split_ctx_cache
        cuts = [0, *sorted(set(raw_pairs)), len(pairs)]
        parts = [backend.integrate_batch(BatchRequest(pairs=pairs[lo:hi])).re
                 for lo, hi in zip(cuts[:-1], cuts[1:])]
        assert np.array_equal(whole, np.concatenate(parts))

    def test_concurrent_submission_bit_exact(self, ctx_of, rng):
        ctx = ctx_of(1, "p0", "laplace", "slp")
        backend = make_host_backends(ctx)[0]
        pairs = random_disjoint_pairs(ctx.mesh, 400, rng)
        requests = [BatchRequest(pairs=pairs[i::4]) for i in range(4)]
        sequential = [backend.integrate_batch(r).re.copy() for r in requests]
        with ThreadPoolExecutor(max_workers=2) as pool:
            threaded = list(pool.map(lambda r: backend.integrate_batch(r).re, requests))
        for seq, thr in zip(sequential, threaded):
            assert np.array_equal(seq, thr)
        assert backend.batches_served == 8
        assert backend.pairs_served == 800

    def test_single_precision_native(self, ctx_of, rng):
        ctx_d = ctx_of(1, "p0", "laplace", "slp")
        ctx_s = ctx_of(1, "p0", "laplace", "slp", precision="single")
        pairs = random_disjoint_pairs(ctx_d.mesh, 200, rng)
        res_d = make_host_backends(ctx_d)[0].integrate_batch(BatchRequest(pairs=pairs))
        res_s = make_host_backends(ctx_s)[0].integrate_batch(BatchRequest(pairs=pairs))
        assert res_s.re.dtype == np.float32
        assert res_d.re.dtype == np.float64
        rel = np.abs(res_s.re.astype(np.float64) - res_d.re) / np.abs(res_d.re)
        assert rel.max() <= 5e-4
        # native single arithmetic, not double rounded at the end
        assert not np.array_equal(res_s.re, res_d.re.astype(np.float32))


class TestRawResultBuffer:
    def test_offsets_pass_through(self, device_ctx, rng):
        pairs = random_disjoint_pairs_from_ctx(device_ctx, 10, rng)
        offsets = np.arange(100, 110)
        res = integrate_batch(device_ctx, BatchRequest(pairs=pairs, offsets=offsets))
        assert np.array_equal(res.offsets, offsets)
        assert np.array_equal(res.pairs, pairs)

    def test_block_and_complex_view(self, ctx_of, rng):
        ctx = ctx_of(1, "p0", "helmholtz", "slp", k=2.0)
        backend = make_host_backends(ctx)[0]
        pairs = random_disjoint_pairs(ctx.mesh, 5, rng)
        res = backend.integrate_batch(BatchRequest(pairs=pairs))
        view = res.complex_view()
        assert view.dtype == np.complex128
        for p in range(5):
            assert np.array_equal(res.block(p), view[p])

    def test_real_kernel_has_no_imag_plane(self, device_ctx, rng):
        pairs = random_disjoint_pairs_from_ctx(device_ctx, 3, rng)
        res = integrate_batch(device_ctx, BatchRequest(pairs=pairs))
        assert res.im is None
        assert res.complex_view() is res.re


def random_disjoint_pairs_from_ctx(device_ctx, n, rng):
    out = []
    conn = device_ctx.elements
    while len(out) < n:
        cand = rng.integers(0, device_ctx.n_elements, size=(4 * n, 2))
        ea, eb = conn[cand[:, 0]], conn[cand[:, 1]]
        ok = ~(ea[:, :, None] == eb[:, None, :]).any(axis=(1, 2))
        out.extend(map(tuple, cand[ok]))
    return np.array(out[:n], dtype=np.int64)
