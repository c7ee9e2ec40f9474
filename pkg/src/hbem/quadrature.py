"""Quadrature rules for Galerkin surface integrals on triangle pairs.

Two families of rules live here.  Regular rules are symmetric positive
point sets on the reference triangle {0 <= eta, 0 <= xi, xi + eta <= 1}
used for well-separated element pairs.  Singular rules are tensor
Gauss-Legendre rules on [0,1]^4 composed with regularising coordinate
transforms that split the product domain into subdomains on which the
1/r-type kernel singularity cancels against the transform Jacobian:
six subdomains for identical elements, five for a shared edge, two for
a shared vertex.  Weights of a singular rule sum to 1/4, the measure of
the product of two unit simplices.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import QuadratureError
from .mesh import TriangleMesh

MAX_REGULAR_ORDER = 4

# Coordinates of the degree-3 six-point rule: barycentric permutations of
# the roots of t^3 - t^2 + t/4 - 1/60, which enforce the moment conditions
# sum t = 1, sum t^2 = 1/2, sum t^3 = 3/10 with uniform weights 1/12.
_DEG3_ROOTS = (0.659027622374092, 0.231933368553031, 0.109039009072877)

# Degree-4 two-orbit rule (6 points, all weights positive).
_DEG4_ORBITS = (
    (0.445948490915965, 0.223381589678011),
    (0.091576213509771, 0.109951743655322),
)


@dataclass(frozen=True)
class QuadratureRule:
    """Point set on the reference triangle.

    points : (q, 2) coordinates (xi, eta) inside the closed reference
        triangle.  weights : (q,) positive weights summing to 1/2, the
        reference-triangle area.
    """

    points: np.ndarray
    weights: np.ndarray
    order: int

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        wts = np.ascontiguousarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) != len(wts):
            raise QuadratureError("rule arrays must be (q, 2) points and (q,) weights")
        if (wts <= 0).any():
            raise QuadratureError("rule weights must be strictly positive")
        if abs(wts.sum() - 0.5) > 1e-14:
            raise QuadratureError(f"rule weights sum to {wts.sum()!r}, expected 0.5")
        eps = 1e-14
        inside = bool((pts >= -eps).all()) and bool((pts.sum(axis=1) <= 1 + eps).all())
        if not inside:
            raise QuadratureError("rule points must lie in the closed reference triangle")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    def __len__(self) -> int:
        return len(self.weights)


def _bary_permutations(bary: tuple[float, float, float]) -> np.ndarray:
    """Distinct permutations of one barycentric triple as (xi, eta) rows."""
    seen = []
    for p in {(bary[i], bary[j], bary[k])
              for i in range(3) for j in range(3) for k in range(3)
              if len({i, j, k}) == 3}:
        seen.append((p[1], p[2]))
    return np.array(sorted(seen))


@lru_cache(maxsize=None)
def regular_rule(order: int) -> QuadratureRule:
    """Symmetric triangle rule exact for polynomials of the given degree.

    Supported orders are 1 through MAX_REGULAR_ORDER.  Orders 3 and 4 both
    use six points; all weights are positive."""
    if not isinstance(order, (int, np.integer)):
        raise QuadratureError(f"order must be an integer, got {order!r}")
    if order < 1 or order > MAX_REGULAR_ORDER:
        raise QuadratureError(
            f"unsupported quadrature order {order}, expected 1..{MAX_REGULAR_ORDER}"
        )
    if order == 1:
        points = np.array([[1 / 3, 1 / 3]])
        weights = np.array([0.5])
    elif order == 2:
        points = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        weights = np.full(3, 1 / 6)
    elif order == 3:
        points = _bary_permutations(_DEG3_ROOTS)
        weights = np.full(6, 1 / 12)
    else:
        points_list = []
        weights_list = []
        for beta, wt in _DEG4_ORBITS:
            alpha = 1.0 - 2.0 * beta
            for b in ((alpha, beta, beta), (beta, alpha, beta), (beta, beta, alpha)):
                points_list.append((b[1], b[2]))
                # published weights are normalised to unit triangle measure 1
                weights_list.append(0.5 * wt)
        points = np.array(points_list)
        weights = np.array(weights_list)
    return QuadratureRule(points=points, weights=weights, order=order)


class PairKind(enum.Enum):
    """Adjacency class of an element pair, ordered by singularity strength."""

    DISJOINT = "disjoint"
    SHARED_VERTEX = "shared_vertex"
    SHARED_EDGE = "shared_edge"
    IDENTICAL = "identical"


SINGULAR_KINDS = (PairKind.SHARED_VERTEX, PairKind.SHARED_EDGE, PairKind.IDENTICAL)

# Subdomain counts of the regularising decompositions.
SUBDOMAIN_COUNT = {
    PairKind.IDENTICAL: 6,
    PairKind.SHARED_EDGE: 5,
    PairKind.SHARED_VERTEX: 2,
}


@dataclass(frozen=True)
class SingularityClass:
    """Pair classification plus the local vertex permutations that bring
    shared vertices to the front in matching order.

    perm_test, perm_trial : tuples p such that element_vertices[p] lists
        the shared vertices first (for a shared edge, the two shared
        vertices appear in the same order on both sides)."""

    kind: PairKind
    perm_test: tuple[int, int, int]
    perm_trial: tuple[int, int, int]


_IDENTITY = (0, 1, 2)


def classify_pair(test_elem: int, trial_elem: int, mesh: TriangleMesh) -> SingularityClass:
    """Classify one element pair by the number of shared vertex indices.

    Shared vertices are detected through global indices, so geometrically
    coincident but topologically distinct vertices count as disjoint."""
    ta = mesh.elements[test_elem]
    tb = mesh.elements[trial_elem]
    shared = sorted(set(ta.tolist()) & set(tb.tolist()))
    if len(shared) == 3:
        perm_a = _IDENTITY
        # align trial locals to the test element's vertex order
        perm_b = tuple(int(np.nonzero(tb == g)[0][0]) for g in ta)
        return SingularityClass(PairKind.IDENTICAL, perm_a, perm_b)
    if len(shared) == 2:
        s0, s1 = shared
        la = [int(np.nonzero(ta == s)[0][0]) for s in (s0, s1)]
        lb = [int(np.nonzero(tb == s)[0][0]) for s in (s0, s1)]
        perm_a = (*la, 3 - la[0] - la[1])
        perm_b = (*lb, 3 - lb[0] - lb[1])
        return SingularityClass(PairKind.SHARED_EDGE, perm_a, perm_b)
    if len(shared) == 1:
        s = shared[0]
        la = int(np.nonzero(ta == s)[0][0])
        lb = int(np.nonzero(tb == s)[0][0])
        rest = lambda l: tuple(i for i in range(3) if i != l)  # noqa: E731
        return SingularityClass(PairKind.SHARED_VERTEX, (la, *rest(la)), (lb, *rest(lb)))
    return SingularityClass(PairKind.DISJOINT, _IDENTITY, _IDENTITY)


@dataclass(frozen=True)
class TensorRule:
    """Flattened singular rule over the product of two reference triangles.

    points : (n, 4) with columns (xi_test, eta_test, xi_trial, eta_trial);
        every pair lies in the closed reference triangle.
    weights : (n,) positive, including the transform Jacobians; they sum
        to 1/4 so the rule applied to 1 returns the product of the two
        simplex measures.  Physical integrals additionally multiply the
        two surface Jacobians.
    """

    points: np.ndarray
    weights: np.ndarray
    kind: PairKind
    n_subdomains: int
    base_order: int

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        wts = np.ascontiguousarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4 or len(pts) != len(wts):
            raise QuadratureError("tensor rule arrays must be (n, 4) and (n,)")
        if (wts <= 0).any():
            raise QuadratureError("tensor rule weights must be positive")
        if abs(wts.sum() - 0.25) > 1e-12:
            raise QuadratureError(f"tensor rule weights sum to {wts.sum()!r}, expected 0.25")
        if self.n_subdomains != SUBDOMAIN_COUNT[self.kind]:
            raise QuadratureError(
                f"{self.kind.value} rule must have {SUBDOMAIN_COUNT[self.kind]} "
                f"subdomains, got {self.n_subdomains}"
            )
        eps = 1e-14
        for c in (0, 2):
            if (pts[:, c:c + 2] < -eps).any() or (pts[:, c] + pts[:, c + 1] > 1 + eps).any():
                raise QuadratureError("tensor rule points must lie in the reference triangle")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @property
    def test_points(self) -> np.ndarray:
        return self.points[:, 0:2]

    @property
    def trial_points(self) -> np.ndarray:
        return self.points[:, 2:4]

    def __len__(self) -> int:
        return len(self.weights)


def _subdomain_maps(kind: PairKind, xi, e1, e2, e3):
    """Subdomain maps in simplex coordinates (u1, u2) with 0<=u2<=u1<=1.

    Returns a list of ((u1, u2), (v1, v2), jacobian) triples covering the
    product of two simplices exactly; u parametrises the test element and
    v the trial element.  The shared entities sit at u = v = (*, 0) (edge)
    and u = v = (0, 0) (vertex) after the classification permutations."""
    if kind is PairKind.IDENTICAL:
        jac = xi**3 * e1**2 * e2
        base = [
            ((xi, xi * (1 - e1 + e1 * e2)), (xi * (1 - e1 * e2 * e3), xi * (1 - e1))),
            ((xi, xi * e1 * (1 - e2 + e2 * e3)), (xi * (1 - e1 * e2), xi * e1 * (1 - e2))),
            ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * (1 - e2))),
        ]
        out = []
        for u, v in base:
            out.append((u, v, jac))
            out.append((v, u, jac))
        return out
    if kind is PairKind.SHARED_EDGE:
        jac_a = xi**3 * e1**2
        jac_b = xi**3 * e1**2 * e2
        return [
            ((xi, xi * e1 * e3), (xi * (1 - e1 * e2), xi * e1 * (1 - e2)), jac_a),
            ((xi, xi * e1), (xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), jac_b),
            ((xi * (1 - e1 * e2), xi * e1 * (1 - e2)), (xi, xi * e1 * e2 * e3), jac_b),
            ((xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), (xi, xi * e1), jac_b),
            ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * e2), jac_b),
        ]
    if kind is PairKind.SHARED_VERTEX:
        jac = xi**3 * e2
        u = (xi, xi * e1)
        v = (xi * e2, xi * e2 * e3)
        return [(u, v, jac), (v, u, jac)]
    raise QuadratureError(f"no singular rule for pair kind {kind!r}")


@lru_cache(maxsize=None)
def singular_rule(kind: PairKind, base_order: int = 4) -> TensorRule:
    """Tensor rule for one singular pair class.

    base_order Gauss-Legendre points are used per tensor dimension, so the
    rule has n_subdomains * base_order**4 points.  Orders below 2 cannot
    integrate the cubic transform Jacobians and are rejected."""
    if kind not in SUBDOMAIN_COUNT:
        raise QuadratureError(f"no singular rule for pair kind {kind!r}")
    if not isinstance(base_order, (int, np.integer)) or base_order < 2:
        raise QuadratureError(f"base_order must be an integer >= 2, got {base_order!r}")

    x, w = np.polynomial.legendre.leggauss(int(base_order))
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    grids = np.meshgrid(x, x, x, x, indexing="ij")
    xi, e1, e2, e3 = (g.ravel() for g in grids)
    w4 = (w[:, None, None, None] * w[None, :, None, None]
          * w[None, None, :, None] * w[None, None, None, :]).ravel()

    maps = _subdomain_maps(kind, xi, e1, e2, e3)
    pts = []
    wts = []
    for (u1, u2), (v1, v2), jac in maps:
        # simplex (u1, u2) -> reference (xi, eta) = (u1 - u2, u2)
        pts.append(np.column_stack([u1 - u2, u2, v1 - v2, v2]))
        wts.append(w4 * jac)
    return TensorRule(
        points=np.concatenate(pts),
        weights=np.concatenate(wts),
        kind=kind,
        n_subdomains=len(maps),
        base_order=int(base_order),
    )


def singular_rules(base_order: int = 4) -> dict[PairKind, TensorRule]:
    """All three singular rules at one base order, keyed by pair kind."""
    return {kind: singular_rule(kind, base_order) for kind in SINGULAR_KINDS}
