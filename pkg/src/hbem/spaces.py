"""Boundary element function spaces on triangle meshes.

Three families: piecewise constants (one DOF per element), continuous
piecewise linears (one DOF per vertex), and discontinuous piecewise
linears (three DOFs per element).  The reference basis on the triangle
is (1 - xi - eta, xi, eta) for linears and the constant 1 otherwise.

The module also provides the surface curl of linear basis functions,
curl_G phi = n x grad_G phi, which is constant per element, and the
sparse transform matrices that express element-local curl and normal
components of a continuous space in the discontinuous space.  These
let a hypersingular operator be applied through purely weakly singular
kernels: D = sum_j Q_j^T S Q_j - k^2 sum_j P_j^T S P_j with S assembled
on the discontinuous space.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import SpaceError
from .mesh import ElementGeometry, TriangleMesh
from .quadrature import QuadratureRule


class Family(enum.Enum):
    P0 = "p0"
    P1_CONTINUOUS = "p1c"
    P1_DISCONTINUOUS = "p1d"


def _as_family(family: Family | str) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return Family(family)
    except ValueError:
        valid = ", ".join(f.value for f in Family)
        raise SpaceError(f"unknown space family {family!r}, expected one of: {valid}") from None


@dataclass(frozen=True)
class FunctionSpace:
    """Global DOF layout of one basis family on one mesh.

    dofmap : (n_elements, local_dim) global DOF index per element-local
        basis function.
    """

    family: Family
    mesh: TriangleMesh
    dofmap: np.ndarray
    n_dofs: int

    def __post_init__(self):
        self.dofmap.setflags(write=False)

    @property
    def local_dim(self) -> int:
        return self.dofmap.shape[1]

    @cached_property
    def dof_centers(self) -> np.ndarray:
        """(n_dofs, 3) geometric anchor per DOF: the element centroid for
        piecewise constants, the supporting vertex for linears.  Used for
        geometric clustering; discontinuous spaces repeat vertex
        coordinates, which is intentional."""
        v = self.mesh.vertices
        if self.family is Family.P0:
            return v[self.mesh.elements].mean(axis=1)
        if self.family is Family.P1_CONTINUOUS:
            return v.copy()
        return v[self.mesh.elements].reshape(-1, 3)


def build_space(mesh: TriangleMesh, family: Family | str) -> FunctionSpace:
    family = _as_family(family)
    m = mesh.n_elements
    if family is Family.P0:
        dofmap = np.arange(m, dtype=np.int64)[:, None]
        n_dofs = m
    elif family is Family.P1_CONTINUOUS:
        dofmap = mesh.elements.copy()
        n_dofs = mesh.n_vertices
    else:
        dofmap = np.arange(3 * m, dtype=np.int64).reshape(m, 3)
        n_dofs = 3 * m
    return FunctionSpace(family=family, mesh=mesh, dofmap=dofmap, n_dofs=n_dofs)


@dataclass(frozen=True)
class BasisTable:
    """Reference basis functions tabulated at quadrature points.

    values : (local_dim, q) basis values.
    ref_gradients : (local_dim, 2) constant reference gradients.
    """

    values: np.ndarray
    ref_gradients: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)
        self.ref_gradients.setflags(write=False)


def evaluate_basis(family: Family | str, points: np.ndarray) -> BasisTable:
    """Tabulate the reference basis at (q, 2) reference points."""
    family = _as_family(family)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise SpaceError(f"points must have shape (q, 2), got {pts.shape}")
    xi, eta = pts[:, 0], pts[:, 1]
    if family is Family.P0:
        values = np.ones((1, len(pts)))
        grads = np.zeros((1, 2))
    else:
        values = np.stack([1.0 - xi - eta, xi, eta])
        grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return BasisTable(values=np.ascontiguousarray(values), ref_gradients=grads)


def basis_table(space: FunctionSpace, rule: QuadratureRule) -> BasisTable:
    return evaluate_basis(space.family, rule.points)


def element_curls(mesh: TriangleMesh, geometry: ElementGeometry) -> np.ndarray:
    """Surface curls of the three local linear basis functions.

    curl_G phi_l = n x (n x e_l) / (2A) = (v_{l+1} - v_{l+2}) / (2A) with
    e_l the edge opposite vertex l; constant on each flat element.
    Returns (n_elements, 3, 3) indexed [element, local_dof, component]."""
    v = mesh.vertices[mesh.elements]
    curls = np.empty((mesh.n_elements, 3, 3))
    for l in range(3):
        curls[:, l, :] = v[:, (l + 1) % 3] - v[:, (l + 2) % 3]
    curls /= geometry.jacobians[:, None, None]  # jacobian = 2 * area
    return curls


def surface_curl(space: FunctionSpace, geometry: ElementGeometry,
                 element: int, local_dof: int) -> np.ndarray:
    """Surface curl of one local basis function on one element."""
    if space.family is Family.P0:
        raise SpaceError("surface curl is defined for linear families only")
    if not 0 <= local_dof < 3:
        raise SpaceError(f"local_dof must be 0..2, got {local_dof}")
    v = space.mesh.element_vertices(element)
    return (v[(local_dof + 1) % 3] - v[(local_dof + 2) % 3]) / geometry.jacobians[element]


@dataclass(frozen=True)
class SparseMatrix:
    """Triplet (COO) sparse matrix; duplicate entries add on conversion."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        if not (len(self.rows) == len(self.cols) == len(self.vals)):
            raise SpaceError("triplet arrays must have equal length")
        for arr in (self.rows, self.cols, self.vals):
            arr.setflags(write=False)

    @property
    def n_entries(self) -> int:
        return len(self.vals)

    def tocsr(self) -> sp.csr_matrix:
        return sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=self.shape).tocsr()

    def toarray(self) -> np.ndarray:
        return self.tocsr().toarray()


def assemble_mass(test_space: FunctionSpace, trial_space: FunctionSpace,
                  geometry: ElementGeometry, rule: QuadratureRule) -> SparseMatrix:
    """Galerkin mass matrix between two spaces on the same mesh."""
    if test_space.mesh is not trial_space.mesh:
        raise SpaceError("mass matrix requires both spaces on the same mesh")
    ta = basis_table(test_space, rule).values
    tb = basis_table(trial_space, rule).values
    # reference-cell local mass, scaled per element by the jacobian
    local = np.einsum("q,iq,jq->ij", rule.weights, ta, tb)
    vals = geometry.jacobians[:, None, None] * local[None, :, :]
    ni, nj = test_space.local_dim, trial_space.local_dim
    rows = np.repeat(test_space.dofmap, nj, axis=1)
    cols = np.tile(trial_space.dofmap, (1, ni))
    return SparseMatrix(
        rows=rows.ravel().copy(),
        cols=cols.ravel().copy(),
        vals=vals.ravel().copy(),
        shape=(test_space.n_dofs, trial_space.n_dofs),
    )


def sparse_transform_matrices(
    continuous: FunctionSpace,
    discontinuous: FunctionSpace,
    geometry: ElementGeometry,
) -> tuple[list[SparseMatrix], list[SparseMatrix]]:
    """Component transforms (Q, P) from a continuous linear space into the
    discontinuous linear space on the same mesh.

    Q[j] carries the j-th Cartesian component of the surface curl: row
    3e + l of Q[j] @ c holds (curl_G sum_m c_m phi_m)_j on element e, the
    same constant for each of the element's three rows, so Q[j] stores
    nine entries per element.  P[j] carries n_j times the nodal values,
    three entries per element.  Used to route hypersingular forms through
    a weakly singular operator assembled on the discontinuous space."""
    if continuous.family is not Family.P1_CONTINUOUS:
        raise SpaceError(f"expected a continuous linear space, got {continuous.family}")
    if discontinuous.family is not Family.P1_DISCONTINUOUS:
        raise SpaceError(f"expected a discontinuous linear space, got {discontinuous.family}")
    if continuous.mesh is not discontinuous.mesh:
        raise SpaceError("transform matrices require both spaces on the same mesh")
    mesh = continuous.mesh
    m = mesh.n_elements
    shape = (discontinuous.n_dofs, continuous.n_dofs)
    curls = element_curls(mesh, geometry)

    # Q[j]: rows 3e+l each receive all three vertex contributions.
    q_rows = np.repeat(discontinuous.dofmap, 3, axis=1).ravel()      # 3e+l repeated per m
    q_cols = np.tile(continuous.dofmap, (1, 3)).ravel()
    q_mats = []
    for j in range(3):
        q_vals = np.tile(curls[:, :, j], (1, 3)).ravel()
        q_mats.append(SparseMatrix(rows=q_rows.copy(), cols=q_cols.copy(),
                                   vals=q_vals.copy(), shape=shape))

    # P[j]: diagonal-like injection weighted by the normal component.
    p_rows = discontinuous.dofmap.ravel()
    p_cols = continuous.dofmap.ravel()
    p_mats = []
    for j in range(3):
        p_vals = np.repeat(geometry.normals[:, j], 3)
        p_mats.append(SparseMatrix(rows=p_rows.copy(), cols=p_cols.copy(),
                                   vals=p_vals.copy(), shape=shape))
    return q_mats, p_mats
