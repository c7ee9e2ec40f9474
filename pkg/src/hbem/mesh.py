"""Triangular surface meshes and cached per-element geometry.

A mesh is a flat array pair (vertices, elements).  Element orientation
follows the right-hand rule: the cross product of the first two edges
points along the outward normal.  Meshes are validated on construction;
topological checks for closed surfaces are separate functions because
open sheets are legitimate inputs for plain operator assembly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import GeometryError, MeshError, MeshParseError

if TYPE_CHECKING:
    from .quadrature import QuadratureRule

logger = logging.getLogger(__name__)

# An element is degenerate when its area falls below this fraction of the
# squared bounding-box diagonal of the whole mesh.
DEGENERACY_REL_TOL = 1e-14

# Refinement levels beyond this produce meshes too large to be useful here
# (20 * 4**8 = 1.3M elements) and are rejected up front.
MAX_SPHERE_LEVEL = 8

_GMSH_TRIANGLE = 2


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle surface mesh.

    vertices : (n_vertices, 3) float64 array of coordinates.
    elements : (n_elements, 3) int64 array of vertex indices, oriented so
        that (v1 - v0) x (v2 - v0) points along the outward normal.
    meta : ingestion metadata, e.g. the number of non-triangle entities
        skipped by a file reader.
    """

    vertices: np.ndarray
    elements: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {vertices.shape}")
        if elements.ndim != 2 or elements.shape[1] != 3:
            raise MeshError(f"elements must have shape (m, 3), got {elements.shape}")
        if elements.size and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise MeshError(
                f"element indices must lie in [0, {len(vertices)}), "
                f"found range [{elements.min()}, {elements.max()}]"
            )
        for k in range(3):
            same = elements[:, k] == elements[:, (k + 1) % 3]
            if same.any():
                e = int(np.nonzero(same)[0][0])
                raise MeshError(f"element {e} repeats vertex index {elements[e, k]}")
        vertices.setflags(write=False)
        elements.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "elements", elements)
        self._check_degenerate()

    def _check_degenerate(self):
        if not len(self.elements):
            return
        v = self.vertices[self.elements]
        cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        diag2 = float(np.sum((self.vertices.max(0) - self.vertices.min(0)) ** 2))
        tol = DEGENERACY_REL_TOL * diag2
        bad = areas <= tol
        if bad.any():
            e = int(np.nonzero(bad)[0][0])
            raise MeshError(
                f"element {e} is degenerate: area {areas[e]:.3e} "
                f"<= {tol:.3e} (relative threshold)"
            )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def element_vertices(self, index: int) -> np.ndarray:
        """Return the (3, 3) coordinate array of one element's corners."""
        return self.vertices[self.elements[index]]


def _directed_edges(mesh: TriangleMesh) -> np.ndarray:
    """All directed edges (a, b) of the mesh as an (3m, 2) array."""
    e = mesh.elements
    return np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])


def mesh_is_closed(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two elements."""
    edges = np.sort(_directed_edges(mesh), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts == 2).all())


def check_consistent_orientation(mesh: TriangleMesh):
    """Verify that adjacent elements traverse shared edges in opposite
    directions.  Raises MeshError naming an offending edge; never flips
    elements silently, since a flipped normal is a modelling error the
    caller must resolve."""
    edges = _directed_edges(mesh)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    dup = counts > 1
    if dup.any():
        uniq = np.unique(edges, axis=0)
        a, b = uniq[np.nonzero(dup)[0][0]]
        raise MeshError(
            f"inconsistent orientation: directed edge ({a}, {b}) appears in "
            f"more than one element; neighbouring elements disagree on normal direction"
        )


def load_mesh(path: str | Path) -> TriangleMesh:
    """Read a Gmsh 2.2 ASCII file.

    Only 3-node triangles (element type 2) become mesh elements; every
    other entity is skipped and counted in ``meta['skipped_elements']``.
    Vertices not referenced by any triangle are dropped and indices are
    compacted.  Malformed input raises MeshParseError with the offending
    line number.
    """
    path = Path(path)
    try:
        with open(path, "r") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc

    def parse_error(msg, lineno, section=None):
        return MeshParseError(f"{path.name}: {msg}", line=lineno, section=section)

    i = 0
    n = len(lines)
    nodes: dict[int, tuple[float, float, float]] = {}
    triangles: list[tuple[int, int, int]] = []
    skipped = 0
    saw_format = saw_nodes = saw_elements = False

    while i < n:
        tok = lines[i].strip()
        if tok == "$MeshFormat":
            header = lines[i + 1].split() if i + 1 < n else []
            if not header:
                raise parse_error("missing format line", i + 2, "$MeshFormat")
            if not header[0].startswith("2."):
                raise parse_error(
                    f"unsupported format version {header[0]!r}, expected 2.x ASCII",
                    i + 2, "$MeshFormat",
                )
            if len(header) > 1 and header[1] != "0":
                raise parse_error("binary files are not supported", i + 2, "$MeshFormat")
            saw_format = True
            i += 2
        elif tok == "$Nodes":
            saw_nodes = True
            try:
                count = int(lines[i + 1])
            except (IndexError, ValueError):
                raise parse_error("expected node count", i + 2, "$Nodes") from None
            for k in range(count):
                lineno = i + 2 + k
                try:
                    parts = lines[lineno].split()
                    tag = int(parts[0])
                    nodes[tag] = (float(parts[1]), float(parts[2]), float(parts[3]))
                except (IndexError, ValueError):
                    raise parse_error("malformed node line", lineno + 1, "$Nodes") from None
            i += 2 + count
            if i >= n or lines[i].strip() != "$EndNodes":
                raise parse_error("missing $EndNodes", i + 1, "$Nodes")
            i += 1
        elif tok == "$Elements":
            saw_elements = True
            try:
                count = int(lines[i + 1])
            except (IndexError, ValueError):
                raise parse_error("expected element count", i + 2, "$Elements") from None
            for k in range(count):
                lineno = i + 2 + k
                try:
                    parts = [int(p) for p in lines[lineno].split()]
                    etype, ntags = parts[1], parts[2]
                    conn = parts[3 + ntags:]
                except (IndexError, ValueError):
                    raise parse_error("malformed element line", lineno + 1, "$Elements") from None
                if etype == _GMSH_TRIANGLE:
                    if len(conn) != 3:
                        raise parse_error(
                            f"triangle with {len(conn)} nodes", lineno + 1, "$Elements"
                        )
                    triangles.append((conn[0], conn[1], conn[2]))
                else:
                    skipped += 1
            i += 2 + count
            if i >= n or lines[i].strip() != "$EndElements":
                raise parse_error("missing $EndElements", i + 1, "$Elements")
            i += 1
        else:
            i += 1

    if not saw_format:
        raise parse_error("no $MeshFormat section", None)
    if not saw_nodes:
        raise parse_error("no $Nodes section", None)
    if not saw_elements:
        raise parse_error("no $Elements section", None)
    if not triangles:
        raise MeshParseError(f"{path.name}: file contains no triangles")

    # Compact to referenced vertices only, preserving first-use order of tags.
    used_tags = sorted({t for tri in triangles for t in tri})
    for t in used_tags:
        if t not in nodes:
            raise MeshParseError(f"{path.name}: element references unknown node tag {t}")
    tag_to_index = {t: j for j, t in enumerate(used_tags)}
    vertices = np.array([nodes[t] for t in used_tags], dtype=np.float64)
    elements = np.array(
        [[tag_to_index[a], tag_to_index[b], tag_to_index[c]] for a, b, c in triangles],
        dtype=np.int64,
    )
    if skipped:
        logger.info("%s: skipped %d non-triangle elements", path.name, skipped)
    return TriangleMesh(vertices, elements, meta={"skipped_elements": skipped,
                                                  "source": str(path)})


# Icosahedron with outward-oriented faces; vertices are normalised below.
_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTICES = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def refine_unit_sphere(level: int) -> TriangleMesh:
    """Icosphere: subdivide an icosahedron ``level`` times, projecting new
    vertices onto the unit sphere.  Produces 20 * 4**level outward-oriented
    elements.  Levels above MAX_SPHERE_LEVEL are rejected."""
    if not isinstance(level, (int, np.integer)) or level < 0:
        raise MeshError(f"refinement level must be a non-negative integer, got {level!r}")
    if level > MAX_SPHERE_LEVEL:
        raise MeshError(f"refinement level {level} exceeds maximum {MAX_SPHERE_LEVEL}")

    verts = [v / np.linalg.norm(v) for v in _ICO_VERTICES]
    faces = [tuple(f) for f in _ICO_FACES]

    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def midpoint_index(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                verts.append(m)
                idx = len(verts) - 1
                midpoint[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    mesh = TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))
    # Construction guarantee: outward orientation for a star-shaped body.
    v = mesh.vertices[mesh.elements]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    centroids = v.mean(axis=1)
    if not (np.einsum("ij,ij->i", normals, centroids) > 0).all():
        raise MeshError("internal error: icosphere produced inward-facing elements")
    return mesh


@dataclass(frozen=True)
class ElementGeometry:
    """Per-element geometric quantities precomputed in structure-of-arrays
    layout for one quadrature rule.

    normals : (m, 3) unit outward normals.
    jacobians : (m,) surface Jacobians of the reference map (= 2 * area).
    areas : (m,) element areas.
    centroids : (m, 3) element centroids.
    qpoints : (m, q, 3) quadrature points mapped to physical space.
    diameters : (m,) longest edge length per element.
    """

    normals: np.ndarray
    jacobians: np.ndarray
    areas: np.ndarray
    centroids: np.ndarray
    qpoints: np.ndarray
    diameters: np.ndarray

    def __post_init__(self):
        for name in ("normals", "jacobians", "areas", "centroids", "qpoints", "diameters"):
            getattr(self, name).setflags(write=False)


def precompute_geometry(mesh: TriangleMesh, rule: "QuadratureRule") -> ElementGeometry:
    """Build the SoA geometry cache used by all integration paths.

    The reference map is x(xi, eta) = v0 + xi (v1 - v0) + eta (v2 - v0);
    its surface Jacobian is twice the element area and is constant per
    element because elements are flat."""
    v = mesh.vertices[mesh.elements]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    cross = np.cross(e1, e2)
    jac = np.linalg.norm(cross, axis=1)
    if (jac == 0).any():
        e = int(np.nonzero(jac == 0)[0][0])
        raise GeometryError(f"element {e} has zero surface Jacobian")
    normals = cross / jac[:, None]
    areas = 0.5 * jac
    centroids = v.mean(axis=1)
    pts = np.asarray(rule.points, dtype=np.float64)
    # (m, q, 3) = v0 + xi e1 + eta e2 for each rule point
    qpoints = (v[:, None, 0]
               + pts[None, :, 0, None] * e1[:, None]
               + pts[None, :, 1, None] * e2[:, None])
    edges = np.stack([np.linalg.norm(e1, axis=1),
                      np.linalg.norm(e2, axis=1),
                      np.linalg.norm(v[:, 2] - v[:, 1], axis=1)])
    diameters = edges.max(axis=0)
    return ElementGeometry(
        normals=normals,
        jacobians=jac,
        areas=areas,
        centroids=centroids,
        qpoints=np.ascontiguousarray(qpoints),
        diameters=diameters,
    )
