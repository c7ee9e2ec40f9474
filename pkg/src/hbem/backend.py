"""Batched integration backend for bulk disjoint element pairs.

The assembly pipeline routes large batches of regular (non-touching)
element pairs through a device abstraction: an immutable DeviceContext
holding precision-cast geometry and basis caches, a BatchRequest naming
the pairs, and a RawResultBuffer of pair-major Galerkin blocks with real
and imaginary planes stored separately.  The host implementation below
is vectorised NumPy over a fixed internal stride; a GPU or other
accelerator can provide the same contract.

Contract highlights:
  * requests must contain disjoint pairs only; anything touching is the
    caller's responsibility (reference integrator), and violations raise
    ContractViolationError naming the first offending pair;
  * results are deterministic and independent of how pairs are split
    across calls, bit for bit;
  * integrate_batch is read-only on the context, hence thread-safe;
  * at most MAX_WEIGHTS quadrature weights are supported per element,
    mirroring the fixed-size weight registers of accelerator kernels.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractViolationError
from .kernels import IntegrationContext, OperatorSpec, kernel_planes
from .mesh import ElementGeometry, TriangleMesh
from .spaces import BasisTable

MAX_WEIGHTS = 6

# Pairs processed per vectorised inner sweep; fixed so that results never
# depend on request size, and sized to keep scratch arrays cache-friendly.
DEFAULT_STRIDE = 4096


@dataclass(frozen=True)
class DeviceContext:
    """Immutable per-device integration state.

    All arrays are cast once to the spec's working precision; bulk kernel
    math then runs natively in that precision.  Arrays are read-only so a
    context can be shared across threads."""

    device_id: int
    spec: OperatorSpec
    elements: np.ndarray
    qpoints: np.ndarray
    normals: np.ndarray
    jacobians: np.ndarray
    weights: np.ndarray
    test_values: np.ndarray
    trial_values: np.ndarray
    curls: np.ndarray | None
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        for name in ("elements", "qpoints", "normals", "jacobians", "weights",
                     "test_values", "trial_values", "curls"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def block_shape(self) -> tuple[int, int]:
        return (self.test_values.shape[0], self.trial_values.shape[0])


def init_device(
    mesh: TriangleMesh,
    geometry: ElementGeometry,
    tables: tuple[BasisTable, BasisTable],
    weights: np.ndarray,
    spec: OperatorSpec,
    device_id: int = 0,
    stride: int = DEFAULT_STRIDE,
) -> DeviceContext:
    """Stage geometry, basis, and quadrature-weight caches for one device.

    weights are the regular-rule weights matching geometry.qpoints.
    Raises CapacityError when the rule exceeds the device weight-register
    capacity of MAX_WEIGHTS."""
    n_weights = geometry.qpoints.shape[1]
    if n_weights > MAX_WEIGHTS:
        raise CapacityError(
            f"quadrature rule has {n_weights} weights, device capacity is {MAX_WEIGHTS}"
        )
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_weights,):
        raise CapacityError(
            f"expected {n_weights} quadrature weights, got shape {weights.shape}"
        )
    test_table, trial_table = tables
    if test_table.values.shape[1] != n_weights or trial_table.values.shape[1] != n_weights:
        raise CapacityError("basis tables and geometry disagree on quadrature point count")
    rd = spec.real_dtype
    curls = None
    if spec.operator == "hyps":
        from .spaces import element_curls  # deferred: spaces imports nothing from here

        curls = np.ascontiguousarray(element_curls(mesh, geometry), dtype=rd)
    return DeviceContext(
        device_id=device_id,
        spec=spec,
        elements=mesh.elements.copy(),
        qpoints=np.ascontiguousarray(geometry.qpoints, dtype=rd),
        normals=np.ascontiguousarray(geometry.normals, dtype=rd),
        jacobians=np.ascontiguousarray(geometry.jacobians, dtype=rd),
        weights=np.ascontiguousarray(weights, dtype=rd),
        test_values=np.ascontiguousarray(test_table.values, dtype=rd),
        trial_values=np.ascontiguousarray(trial_table.values, dtype=rd),
        curls=curls,
        stride=int(stride),
    )


@dataclass(frozen=True)
class BatchRequest:
    """A batch of element pairs to integrate.

    pairs : (p, 2) test/trial element indices, all disjoint.
    offsets : optional (p,) caller bookkeeping (e.g. positions in a chunk
        buffer); passed through untouched to the result."""

    pairs: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        pairs = np.ascontiguousarray(self.pairs, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ContractViolationError(f"pairs must have shape (p, 2), got {pairs.shape}")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        if self.offsets is not None:
            off = np.ascontiguousarray(self.offsets, dtype=np.int64)
            if off.shape != (len(pairs),):
                raise ContractViolationError("offsets must have one entry per pair")
            off.setflags(write=False)
            object.__setattr__(self, "offsets", off)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class RawResultBuffer:
    """Pair-major Galerkin blocks with split complex planes.

    re, im : (p, nt, ns) arrays in working precision; im is None for real
    kernels.  Block p corresponds to request pair p."""

    re: np.ndarray
    im: np.ndarray | None
    pairs: np.ndarray
    offsets: np.ndarray | None

    def block(self, p: int) -> np.ndarray:
        if self.im is None:
            return self.re[p]
        return self.re[p] + 1j * self.im[p]

    def complex_view(self) -> np.ndarray:
        """(p, nt, ns) combined array (complex when im is present)."""
        if self.im is None:
            return self.re
        return self.re + 1j * self.im

    def __len__(self) -> int:
        return len(self.re)


def _check_disjoint(ctx: DeviceContext, pairs: np.ndarray):
    if len(pairs) == 0:
        return
    lo, hi = pairs.min(), pairs.max()
    if lo < 0 or hi >= ctx.n_elements:
        raise ContractViolationError(
            f"pair indices must lie in [0, {ctx.n_elements}), found [{lo}, {hi}]"
        )
    ea = ctx.elements[pairs[:, 0]]
    eb = ctx.elements[pairs[:, 1]]
    shared = (ea[:, :, None] == eb[:, None, :]).any(axis=(1, 2))
    if shared.any():
        p = int(np.nonzero(shared)[0][0])
        a, b = pairs[p]
        raise ContractViolationError(
            f"request pair {p} = ({a}, {b}) is not disjoint; "
            "touching pairs must take the singular path"
        )


def integrate_batch(ctx: DeviceContext, request: BatchRequest) -> RawResultBuffer:
    """Integrate all pairs of a request on one device.

    Sweeps the batch in fixed-size strides; each pair's block depends only
    on that pair's data, so splitting a request across calls cannot change
    any result bit."""
    pairs = request.pairs
    _check_disjoint(ctx, pairs)
    spec = ctx.spec
    nt, ns = ctx.block_shape
    p_total = len(pairs)
    rd = spec.real_dtype
    out_re = np.empty((p_total, nt, ns), dtype=rd)
    out_im = np.empty((p_total, nt, ns), dtype=rd) if spec.is_complex else None
    w = ctx.weights
    ta = ctx.test_values
    tb = ctx.trial_values
    k = spec.wavenumber
    k2 = rd.type(k * k)

    for s0 in range(0, p_total, ctx.stride):
        sl = slice(s0, min(p_total, s0 + ctx.stride))
        a = pairs[sl, 0]
        b = pairs[sl, 1]
        x = ctx.qpoints[a]
        y = ctx.qpoints[b]
        diff = x[:, :, None, :] - y[:, None, :, :]
        r = np.sqrt(np.einsum("spqi,spqi->spq", diff, diff))
        jj = ctx.jacobians[a] * ctx.jacobians[b]

        if spec.operator == "hyps":
            re, im = kernel_planes("slp", k, diff, r)
            curl_dot = np.einsum("sic,sjc->sij", ctx.curls[a], ctx.curls[b])
            ndot = np.einsum("si,si->s", ctx.normals[a], ctx.normals[b])
            jj3 = jj[:, None, None]

            def reduce_plane(plane, out):
                s_flat = np.einsum("p,q,spq->s", w, w, plane)
                s_ij = np.einsum("p,q,spq,ip,jq->sij", w, w, plane, ta, tb)
                np.multiply(jj3, curl_dot * s_flat[:, None, None]
                            - (k2 * ndot)[:, None, None] * s_ij, out=out)
        else:
            na = np.broadcast_to(ctx.normals[a][:, None, None, :], diff.shape)
            nb = np.broadcast_to(ctx.normals[b][:, None, None, :], diff.shape)
            re, im = kernel_planes(spec.operator, k, diff, r, na, nb)
            jj3 = jj[:, None, None]

            def reduce_plane(plane, out):
                np.multiply(jj3, np.einsum("p,q,spq,ip,jq->sij", w, w, plane, ta, tb),
                            out=out)

        reduce_plane(re, out_re[sl])
        if out_im is not None:
            reduce_plane(im, out_im[sl])

    return RawResultBuffer(re=out_re, im=out_im, pairs=pairs, offsets=request.offsets)


class HostBackend:
    """Host implementation of the batched-integrator capability.

    Wraps one DeviceContext and counts the traffic it serves.  Instances
    are safe to share across worker threads."""

    def __init__(self, context: DeviceContext):
        self.context = context
        self._lock = threading.Lock()
        self.batches_served = 0
        self.pairs_served = 0

    @property
    def device_id(self) -> int:
        return self.context.device_id

    def integrate_batch(self, request: BatchRequest) -> RawResultBuffer:
        result = integrate_batch(self.context, request)
        with self._lock:
            self.batches_served += 1
            self.pairs_served += len(request)
        return result


def make_host_backends(ctx: IntegrationContext, n_devices: int = 1,
                       stride: int = DEFAULT_STRIDE) -> list[HostBackend]:
    """Build identical host devices from one integration context.

    Multiple host devices emulate a multi-accelerator node: each gets its
    own context object (sharing nothing mutable) so scheduling code can
    treat them uniformly."""
    if n_devices < 1:
        raise CapacityError(f"need at least one device, got {n_devices}")
    backends = []
    for dev in range(n_devices):
        device_ctx = init_device(
            ctx.mesh, ctx.geometry, (ctx.test_table, ctx.trial_table),
            ctx.regular_rule.weights, ctx.spec, device_id=dev, stride=stride,
        )
        backends.append(HostBackend(device_ctx))
    return backends
