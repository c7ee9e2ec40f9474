"""Boundary integral kernels and the reference pairwise integrator.

Supported kernels for the Laplace and Helmholtz equations, with
g(x, y) = exp(ik|x - y|) / (4 pi |x - y|) and k = 0 for Laplace:

  slp   g(x, y)
  dlp   dg/dn_y = <x - y, n_y> (1 - ikr) e^{ikr} / (4 pi r^3)
  adlp  dg/dn_x = -<x - y, n_x> (1 - ikr) e^{ikr} / (4 pi r^3)
  hyps  integrated-by-parts bilinear form
        curl_G psi(x) . curl_G phi(y) g - k^2 psi(x) phi(y) <n_x, n_y> g

Complex values travel as separate (real, imaginary) planes in all bulk
evaluations; complex dtypes appear only at the block level.  The
reference integrator local_matrix handles every adjacency class and is
the correctness anchor for the batched backend: disjoint pairs use the
tensor product of a regular triangle rule, touching pairs use the
regularising tensor rules from the quadrature module.

Touching pairs with test index above trial index are evaluated by
transposing the swapped pair (slp and hyps kernels are symmetric, dlp
and adlp are mutual transposes), which makes the discrete dualities
S = S^T and K' = K^T hold exactly rather than to quadrature accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import KernelError
from .mesh import ElementGeometry, TriangleMesh, precompute_geometry
from .quadrature import (
    PairKind,
    QuadratureRule,
    SingularityClass,
    TensorRule,
    classify_pair,
    regular_rule,
    singular_rules,
)
from .spaces import BasisTable, Family, FunctionSpace, basis_table, element_curls

EQUATIONS = ("laplace", "helmholtz")
OPERATORS = ("slp", "dlp", "adlp", "hyps")
PRECISIONS = ("double", "single")

INV_4PI = 1.0 / (4.0 * np.pi)

_TRANSPOSED_OPERATOR = {"slp": "slp", "dlp": "adlp", "adlp": "dlp", "hyps": "hyps"}


@dataclass(frozen=True)
class OperatorSpec:
    """Which boundary operator to integrate, for which equation, at which
    wavenumber and working precision."""

    equation: str
    operator: str
    wavenumber: float = 0.0
    precision: str = "double"

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise KernelError(f"unknown equation {self.equation!r}, expected {EQUATIONS}")
        if self.operator not in OPERATORS:
            raise KernelError(f"unknown operator {self.operator!r}, expected {OPERATORS}")
        if self.precision not in PRECISIONS:
            raise KernelError(f"unknown precision {self.precision!r}, expected {PRECISIONS}")
        k = self.wavenumber
        if not np.isfinite(k):
            raise KernelError(f"wavenumber must be finite, got {k!r}")
        if self.equation == "laplace" and k != 0.0:
            raise KernelError("laplace kernels require wavenumber 0")
        if self.equation == "helmholtz" and k <= 0.0:
            raise KernelError(f"helmholtz kernels require a positive wavenumber, got {k}")

    @property
    def is_complex(self) -> bool:
        return self.equation == "helmholtz"

    @property
    def real_dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == "double" else np.float32)

    @property
    def result_dtype(self) -> np.dtype:
        if self.is_complex:
            return np.dtype(np.complex128 if self.precision == "double" else np.complex64)
        return self.real_dtype

    @property
    def transposed(self) -> "OperatorSpec":
        """Spec of the operator whose matrix is this operator's transpose."""
        return replace(self, operator=_TRANSPOSED_OPERATOR[self.operator])


def green(spec: OperatorSpec, x, y):
    """Pointwise fundamental solution; reference implementation."""
    r = np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    if r < 1e-300:
        raise KernelError(f"kernel evaluated at coincident points, |x - y| = {r}")
    if spec.is_complex:
        return np.exp(1j * spec.wavenumber * r) * INV_4PI / r
    return INV_4PI / r


def green_dny(spec: OperatorSpec, x, y, n_y):
    """Pointwise normal derivative in y; reference implementation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = x - y
    r = np.linalg.norm(diff)
    if r < 1e-300:
        raise KernelError(f"kernel evaluated at coincident points, |x - y| = {r}")
    d = float(np.dot(diff, np.asarray(n_y, dtype=np.float64)))
    k = spec.wavenumber
    if spec.is_complex:
        return d * (1.0 - 1j * k * r) * np.exp(1j * k * r) * INV_4PI / r**3
    return d * INV_4PI / r**3


def green_dnx(spec: OperatorSpec, x, y, n_x):
    """Pointwise normal derivative in x; equals -green_dny with n_x."""
    return -green_dny(spec, x, y, n_x)


def kernel_planes(operator: str, wavenumber: float, diff, r, n_test=None, n_trial=None):
    """Bulk kernel evaluation as separate real and imaginary planes.

    diff : (..., 3) array x - y; r : (...) distances, strictly positive.
    Computation runs in the dtype of the inputs, so float32 caches give a
    genuine single-precision path.  Returns (re, im) with im None for
    Laplace.  The hyps kernel reuses slp planes and is not valid here."""
    if operator == "hyps":
        raise KernelError("hyps has no pointwise kernel; integrate via slp planes")
    one = r.dtype.type(1.0)
    inv4pi = r.dtype.type(INV_4PI)
    if operator == "slp":
        amp = inv4pi / r
        if wavenumber == 0.0:
            return amp, None
        kr = r.dtype.type(wavenumber) * r
        return amp * np.cos(kr), amp * np.sin(kr)
    if operator == "dlp":
        dot = np.einsum("...i,...i->...", diff, n_trial)
    elif operator == "adlp":
        dot = -np.einsum("...i,...i->...", diff, n_test)
    else:
        raise KernelError(f"unknown operator {operator!r}")
    amp = dot * (inv4pi / r**3)
    if wavenumber == 0.0:
        return amp, None
    kr = r.dtype.type(wavenumber) * r
    c, s = np.cos(kr), np.sin(kr)
    # (1 - ikr) e^{ikr} = (cos kr + kr sin kr) + i (sin kr - kr cos kr)
    return amp * (c + kr * s), amp * (s - kr * c)


@dataclass(frozen=True)
class IntegrationContext:
    """Everything local_matrix needs, bundled once per (operator, spaces).

    Holds the operator spec, both spaces with their tabulated bases at the
    shared regular rule, the geometry cache built for that rule, the
    singular tensor rules keyed by pair kind, and per-element surface
    curls when the operator is hypersingular."""

    spec: OperatorSpec
    mesh: TriangleMesh
    geometry: ElementGeometry
    test_space: FunctionSpace
    trial_space: FunctionSpace
    test_table: BasisTable
    trial_table: BasisTable
    regular_rule: QuadratureRule
    singular: dict[PairKind, TensorRule]
    curls: np.ndarray | None

    @cached_property
    def swapped(self) -> "IntegrationContext":
        """Same context with test/trial roles exchanged and the kernel
        transposed; used to canonicalise touching-pair evaluations."""
        return IntegrationContext(
            spec=self.spec.transposed,
            mesh=self.mesh,
            geometry=self.geometry,
            test_space=self.trial_space,
            trial_space=self.test_space,
            test_table=self.trial_table,
            trial_table=self.test_table,
            regular_rule=self.regular_rule,
            singular=self.singular,
            curls=self.curls,
        )


def make_integration_context(
    spec: OperatorSpec,
    test_space: FunctionSpace,
    trial_space: FunctionSpace,
    regular_order: int = 4,
    singular_base_order: int = 4,
) -> IntegrationContext:
    if test_space.mesh is not trial_space.mesh:
        raise KernelError("test and trial spaces must share one mesh")
    mesh = test_space.mesh
    rule = regular_rule(regular_order)
    geometry = precompute_geometry(mesh, rule)
    curls = None
    if spec.operator == "hyps":
        if Family.P0 in (test_space.family, trial_space.family):
            raise KernelError("hyps requires linear test and trial spaces")
        curls = element_curls(mesh, geometry)
    return IntegrationContext(
        spec=spec,
        mesh=mesh,
        geometry=geometry,
        test_space=test_space,
        trial_space=trial_space,
        test_table=basis_table(test_space, rule),
        trial_table=basis_table(trial_space, rule),
        regular_rule=rule,
        singular=singular_rules(singular_base_order),
        curls=curls,
    )


def _map_points(tri: np.ndarray, ref_points: np.ndarray) -> np.ndarray:
    """Map (q, 2) reference points into a (3, 3) triangle."""
    return (tri[0]
            + np.outer(ref_points[:, 0], tri[1] - tri[0])
            + np.outer(ref_points[:, 1], tri[2] - tri[0]))


def _basis_at(family: Family, local_dim: int, perm, ref_points: np.ndarray) -> np.ndarray:
    """Basis values (local_dim, q) in original local numbering for points
    given in the frame of the permuted triangle."""
    if local_dim == 1:
        return np.ones((1, len(ref_points)))
    xi, eta = ref_points[:, 0], ref_points[:, 1]
    bary = np.stack([1.0 - xi - eta, xi, eta])
    values = np.empty_like(bary)
    values[list(perm)] = bary
    return values


def _singular_block(ctx: IntegrationContext, test_elem: int, trial_elem: int,
                    cls: SingularityClass) -> np.ndarray:
    spec = ctx.spec
    mesh = ctx.mesh
    rule = ctx.singular[cls.kind]
    va = mesh.element_vertices(test_elem)[list(cls.perm_test)]
    vb = mesh.element_vertices(trial_elem)[list(cls.perm_trial)]
    x = _map_points(va, rule.test_points)
    y = _map_points(vb, rule.trial_points)
    diff = x - y
    r = np.sqrt(np.einsum("qi,qi->q", diff, diff))
    jj = ctx.geometry.jacobians[test_elem] * ctx.geometry.jacobians[trial_elem]
    w = rule.weights * jj

    ta = _basis_at(ctx.test_space.family, ctx.test_space.local_dim,
                   cls.perm_test, rule.test_points)
    tb = _basis_at(ctx.trial_space.family, ctx.trial_space.local_dim,
                   cls.perm_trial, rule.trial_points)

    if spec.operator == "hyps":
        re, im = kernel_planes("slp", spec.wavenumber, diff, r)
        ca = ctx.curls[test_elem]
        cb = ctx.curls[trial_elem]
        curl_dot = ca @ cb.T
        ndot = float(ctx.geometry.normals[test_elem] @ ctx.geometry.normals[trial_elem])
        k2 = spec.wavenumber**2

        def reduce_plane(plane):
            s0 = np.dot(w, plane)
            sij = np.einsum("q,iq,jq->ij", w * plane, ta, tb)
            return curl_dot * s0 - k2 * ndot * sij
    else:
        na = np.broadcast_to(ctx.geometry.normals[test_elem], x.shape)
        nb = np.broadcast_to(ctx.geometry.normals[trial_elem], y.shape)
        re, im = kernel_planes(spec.operator, spec.wavenumber, diff, r, na, nb)

        def reduce_plane(plane):
            return np.einsum("q,iq,jq->ij", w * plane, ta, tb)

    if im is None:
        return reduce_plane(re)
    return reduce_plane(re) + 1j * reduce_plane(im)


def _regular_block(ctx: IntegrationContext, test_elem: int, trial_elem: int) -> np.ndarray:
    spec = ctx.spec
    g = ctx.geometry
    x = g.qpoints[test_elem]
    y = g.qpoints[trial_elem]
    diff = x[:, None, :] - y[None, :, :]
    r = np.sqrt(np.einsum("pqi,pqi->pq", diff, diff))
    wq = ctx.regular_rule.weights
    jj = g.jacobians[test_elem] * g.jacobians[trial_elem]
    ta = ctx.test_table.values
    tb = ctx.trial_table.values

    if spec.operator == "hyps":
        re, im = kernel_planes("slp", spec.wavenumber, diff, r)
        ca = ctx.curls[test_elem]
        cb = ctx.curls[trial_elem]
        curl_dot = ca @ cb.T
        ndot = float(g.normals[test_elem] @ g.normals[trial_elem])
        k2 = spec.wavenumber**2

        def reduce_plane(plane):
            s0 = np.einsum("p,q,pq->", wq, wq, plane)
            sij = np.einsum("p,q,pq,ip,jq->ij", wq, wq, plane, ta, tb)
            return jj * (curl_dot * s0 - k2 * ndot * sij)
    else:
        na = np.broadcast_to(g.normals[test_elem], diff.shape)
        nb = np.broadcast_to(g.normals[trial_elem], diff.shape)
        re, im = kernel_planes(spec.operator, spec.wavenumber, diff, r, na, nb)

        def reduce_plane(plane):
            return jj * np.einsum("p,q,pq,ip,jq->ij", wq, wq, plane, ta, tb)

    if im is None:
        return reduce_plane(re)
    return reduce_plane(re) + 1j * reduce_plane(im)


def local_matrix(ctx: IntegrationContext, test_elem: int, trial_elem: int) -> np.ndarray:
    """Galerkin block of one element pair, shape (test local_dim, trial
    local_dim), in the context's result dtype.

    This is the reference integration path: correct for every adjacency
    class, vectorised only over quadrature points.  Bulk disjoint pairs
    belong in the batched backend."""
    cls = classify_pair(test_elem, trial_elem, ctx.mesh)
    if cls.kind is PairKind.DISJOINT:
        block = _regular_block(ctx, test_elem, trial_elem)
    elif cls.kind is not PairKind.IDENTICAL and test_elem > trial_elem:
        # canonical orientation: evaluate the transposed kernel on the
        # swapped pair so both orderings share one quadrature evaluation
        block = _singular_block(ctx.swapped, trial_elem, test_elem,
                                classify_pair(trial_elem, test_elem, ctx.mesh)).T
    else:
        block = _singular_block(ctx, test_elem, trial_elem, cls)
    return block.astype(ctx.spec.result_dtype, copy=False)
