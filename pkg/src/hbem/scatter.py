"""Acoustic plane-wave scattering off a closed surface.

Burton-Miller combined-field formulation for the sound-hard exterior
problem: solve (1/2 M - K - eta_c D) phi = M u_inc - eta_c M du_inc/dn
for the total Dirichlet trace phi, with the hypersingular operator applied
through its single-layer transform factorization.  Far-field pressures,
bistatic target strength, and field-deviation metrics round out the
application layer.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .assembly import AssemblyConfig, assemble_dense
from .backend import make_host_backends
from .errors import ConfigError, MeshError, SolverError, SpaceError
from .hmatrix import (
    DEFAULT_ETA,
    DEFAULT_N_MIN,
    AcaConfig,
    assemble_hmatrix,
    cluster_trees_for,
    hmat_matvec,
)
from .kernels import OperatorSpec, kernel_planes, make_integration_context
from .mesh import (
    TriangleMesh,
    check_consistent_orientation,
    load_mesh,
    mesh_is_closed,
    precompute_geometry,
    refine_unit_sphere,
)
from .quadrature import regular_rule
from .solvers import gmres
from .spaces import (
    FunctionSpace,
    assemble_mass,
    basis_table,
    build_space,
    sparse_transform_matrices,
)

MIN_ELEMENTS_PER_WAVELENGTH = 6.0
NEAR_FIELD_DIAMETERS = 3.0


def wavenumber_from_frequency(frequency: float, sound_speed: float) -> float:
    """k = 2 pi f / c."""
    if frequency <= 0.0 or sound_speed <= 0.0:
        raise ConfigError(
            f"frequency and sound speed must be > 0, got {frequency}, {sound_speed}"
        )
    return 2.0 * np.pi * frequency / sound_speed


@dataclass(frozen=True)
class PlaneWave:
    """Incident pressure wave u(x) = amplitude * exp(i k <d, x>)."""

    amplitude: complex
    direction: np.ndarray
    wavenumber: float

    def __post_init__(self):
        d = np.ascontiguousarray(self.direction, dtype=np.float64)
        if d.shape != (3,):
            raise ConfigError(f"direction must be a 3-vector, got shape {d.shape}")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ConfigError(
                f"direction must be unit length within 1e-12, |d| = {np.linalg.norm(d)!r}"
            )
        if self.wavenumber <= 0.0:
            raise ConfigError(f"wavenumber must be > 0, got {self.wavenumber}")
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        phase = points @ (self.wavenumber * self.direction)
        return self.amplitude * np.exp(1j * phase)


def incidence_direction(theta_deg: float) -> np.ndarray:
    """Propagation direction in the xy-plane for an incidence angle."""
    t = np.deg2rad(theta_deg)
    return np.array([np.cos(t), np.sin(t), 0.0])


def evaluation_ring(n_points: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """n equally spaced observation points on a circle in the xy-plane.

    Returns (points (n, 3), angles_deg (n,))."""
    if n_points < 1:
        raise ConfigError(f"n_points must be >= 1, got {n_points}")
    if radius <= 0.0:
        raise ConfigError(f"radius must be > 0, got {radius}")
    ang = np.arange(n_points) * (360.0 / n_points)
    t = np.deg2rad(ang)
    pts = np.zeros((n_points, 3))
    pts[:, 0] = radius * np.cos(t)
    pts[:, 1] = radius * np.sin(t)
    return pts, ang


@dataclass(frozen=True)
class ScatterConfig:
    """Problem definition for one scattering run.

    The mesh is either a Gmsh file (mesh_file) or a unit icosphere at the
    given refinement level.  Assembly and compression behavior is
    delegated to the embedded AssemblyConfig / AcaConfig."""

    frequency: float = 477.46482927568605  # k = 2 with c = 1500
    sound_speed: float = 1500.0
    sphere_level: int = 3
    mesh_file: str | None = None
    amplitude: float = 1.0
    theta_inc_deg: float = 0.0
    radius: float = 100.0
    n_points: int = 3600
    tol: float = 1e-5
    restart: int = 100
    max_iter: int | None = None
    eta: float = DEFAULT_ETA
    n_min: int = DEFAULT_N_MIN
    force: bool = False
    assembly: AssemblyConfig = field(default_factory=AssemblyConfig)
    aca: AcaConfig = field(default_factory=AcaConfig)

    def __post_init__(self):
        if self.frequency <= 0.0:
            raise ConfigError(f"frequency must be > 0, got {self.frequency}")
        if self.sound_speed <= 0.0:
            raise ConfigError(f"sound_speed must be > 0, got {self.sound_speed}")
        if self.radius <= 0.0:
            raise ConfigError(f"radius must be > 0, got {self.radius}")
        if self.n_points < 1:
            raise ConfigError(f"n_points must be >= 1, got {self.n_points}")
        if self.mesh_file is None and self.sphere_level < 0:
            raise ConfigError(f"sphere_level must be >= 0, got {self.sphere_level}")
        if self.tol <= 0.0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.restart < 1:
            raise ConfigError(f"restart must be >= 1, got {self.restart}")

    @property
    def wavenumber(self) -> float:
        return wavenumber_from_frequency(self.frequency, self.sound_speed)

    def plane_wave(self) -> PlaneWave:
        return PlaneWave(
            complex(self.amplitude),
            incidence_direction(self.theta_inc_deg),
            self.wavenumber,
        )

    def build_mesh(self) -> TriangleMesh:
        if self.mesh_file is not None:
            return load_mesh(self.mesh_file)
        return refine_unit_sphere(self.sphere_level)


@dataclass(frozen=True)
class SolveReport:
    """Result of a Burton-Miller solve plus diagnostics."""

    phi: np.ndarray
    converged: bool
    iterations: int
    residual: float
    residuals: tuple[float, ...]
    timings: dict
    mode: str
    wavenumber: float
    n_dofs: int
    n_elements: int


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Outward unit normal per vertex, area-weighted over adjacent elements."""
    geom = precompute_geometry(mesh, regular_rule(1))
    vn = np.zeros((mesh.n_vertices, 3))
    contrib = np.repeat(geom.normals * geom.areas[:, None], 3, axis=0)
    np.add.at(vn, mesh.elements.ravel(), contrib)
    norms = np.linalg.norm(vn, axis=1)
    if np.any(norms == 0.0):
        raise MeshError("vertex with vanishing aggregate normal")
    return vn / norms[:, None]


def incident_trace(
    wave: PlaneWave, mesh: TriangleMesh, space: FunctionSpace
) -> tuple[np.ndarray, np.ndarray]:
    """Nodal Dirichlet and Neumann traces of the incident wave.

    du/dn = i k <d, n> u with the vertex normal used at each node."""
    if space.family.value != "p1c":
        raise SpaceError(
            f"incident traces need the continuous P1 space, got {space.family.value}"
        )
    if space.mesh is not mesh:
        raise SpaceError("space was built on a different mesh")
    u = wave.evaluate(mesh.vertices)
    vn = vertex_normals(mesh)
    dn = 1j * wave.wavenumber * (vn @ wave.direction) * u
    return u, dn


def _resolution_guard(mesh: TriangleMesh, k: float, force: bool):
    geom = precompute_geometry(mesh, regular_rule(1))
    h = float(geom.diameters.max())
    wavelength = 2.0 * np.pi / k
    epw = wavelength / h
    if epw < MIN_ELEMENTS_PER_WAVELENGTH and not force:
        raise SolverError(
            f"mesh resolves {epw:.2f} elements per wavelength, below the "
            f"minimum {MIN_ELEMENTS_PER_WAVELENGTH:g}; refine the mesh or "
            "pass force=True to proceed anyway"
        )
    return epw


def burton_miller_solve(
    cfg: ScatterConfig,
    wave: PlaneWave | None = None,
    mode: str = "dense",
    mesh: TriangleMesh | None = None,
    stats: dict | None = None,
) -> SolveReport:
    """Solve the sound-hard scattering problem for the total surface trace.

    The combined-field system (1/2 M - K - eta_c D) phi = M u_inc
    - eta_c M du_inc/dn with eta_c = 1/(i k) is applied matrix-free:
    K dense or hierarchical, D through the single-layer transform
    factorization sum_j Q_j^T S Q_j - k^2 sum_j P_j^T S P_j on the
    discontinuous P1 space, and M as a sparse mass matrix."""
    if mode not in ("dense", "hmatrix"):
        raise ConfigError(f"mode must be 'dense' or 'hmatrix', got {mode!r}")
    if wave is None:
        wave = cfg.plane_wave()
    k = wave.wavenumber
    if abs(k - cfg.wavenumber) > 1e-9 * max(k, cfg.wavenumber):
        raise ConfigError(
            f"wave has k = {k}, config implies k = {cfg.wavenumber}; "
            "they must describe the same problem"
        )
    if mesh is None:
        mesh = cfg.build_mesh()
    if not mesh_is_closed(mesh):
        raise MeshError("scattering requires a closed surface mesh")
    check_consistent_orientation(mesh)
    epw = _resolution_guard(mesh, k, cfg.force)

    t0 = time.perf_counter()
    p1c = build_space(mesh, "p1c")
    p1d = build_space(mesh, "p1d")
    geometry = precompute_geometry(mesh, regular_rule(cfg.assembly.regular_order))
    mass = assemble_mass(p1c, p1c, geometry, regular_rule(2)).tocsr()
    q_mats, p_mats = sparse_transform_matrices(p1c, p1d, geometry)
    q_csr = [q.tocsr() for q in q_mats]
    p_csr = [p.tocsr() for p in p_mats]
    qt_csr = [q.tocsr().T.tocsr() for q in q_mats]
    pt_csr = [p.tocsr().T.tocsr() for p in p_mats]

    spec_k = OperatorSpec("helmholtz", "dlp", wavenumber=k)
    spec_s = OperatorSpec("helmholtz", "slp", wavenumber=k)
    devices = cfg.assembly.devices if cfg.assembly.devices else 1

    if mode == "dense":
        ctx_k = make_integration_context(
            spec_k, p1c, p1c,
            regular_order=cfg.assembly.regular_order,
            singular_base_order=cfg.assembly.singular_base_order,
        )
        ctx_s = make_integration_context(
            spec_s, p1d, p1d,
            regular_order=cfg.assembly.regular_order,
            singular_base_order=cfg.assembly.singular_base_order,
        )
        k_op = assemble_dense(
            spec_k, p1c, p1c, cfg.assembly, make_host_backends(ctx_k, devices)
        )
        s_op = assemble_dense(
            spec_s, p1d, p1d, cfg.assembly, make_host_backends(ctx_s, devices)
        )

        def apply_k(x):
            return k_op @ x

        def apply_s(x):
            return s_op @ x

    else:
        tree_k = cluster_trees_for(p1c, p1c, n_min=cfg.n_min, eta=cfg.eta)
        tree_s = cluster_trees_for(p1d, p1d, n_min=cfg.n_min, eta=cfg.eta)
        k_op = assemble_hmatrix(
            spec_k, p1c, p1c, tree_k, cfg.aca, assembly_config=cfg.assembly
        )
        s_op = assemble_hmatrix(
            spec_s, p1d, p1d, tree_s, cfg.aca, assembly_config=cfg.assembly
        )

        def apply_k(x):
            return hmat_matvec(k_op, x)

        def apply_s(x):
            return hmat_matvec(s_op, x)

    eta_c = 1.0 / (1j * k)

    def apply_d(x):
        out = np.zeros(p1c.n_dofs, dtype=np.complex128)
        for q, qt in zip(q_csr, qt_csr):
            out += qt @ apply_s(q @ x)
        acc = np.zeros(p1c.n_dofs, dtype=np.complex128)
        for p, pt in zip(p_csr, pt_csr):
            acc += pt @ apply_s(p @ x)
        return out - k * k * acc

    def operator(x):
        return 0.5 * (mass @ x) - apply_k(x) - eta_c * apply_d(x)

    u_inc, du_inc = incident_trace(wave, mesh, p1c)
    rhs = mass @ u_inc - eta_c * (mass @ du_inc)
    t1 = time.perf_counter()

    result = gmres(
        operator, rhs, tol=cfg.tol, restart=cfg.restart, max_iter=cfg.max_iter
    )
    t2 = time.perf_counter()
    if not result.converged:
        err = SolverError(
            f"GMRES did not reach tolerance {cfg.tol:g} within "
            f"{result.iterations} iterations (residual {result.residual:.3e})"
        )
        err.residuals = result.residuals
        raise err

    if stats is not None:
        stats["elements_per_wavelength"] = epw
        stats["mode"] = mode
    timings = {"assembly": t1 - t0, "solve": t2 - t1}
    return SolveReport(
        phi=result.x,
        converged=result.converged,
        iterations=result.iterations,
        residual=result.residual,
        residuals=result.residuals,
        timings=timings,
        mode=mode,
        wavenumber=k,
        n_dofs=p1c.n_dofs,
        n_elements=mesh.n_elements,
    )


def evaluate_far_field(
    mesh: TriangleMesh,
    space: FunctionSpace,
    phi: np.ndarray,
    points: np.ndarray,
    k: float,
    quad_order: int = 4,
    chunk_size: int = 256,
) -> np.ndarray:
    """Scattered field u(x) = int dG(x,y)/dn_y phi(y) ds_y off the surface.

    Regular quadrature per element; points are expected well away from the
    surface (a warning is issued inside 3 element diameters)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ConfigError(f"points must have shape (n, 3), got {pts.shape}")
    phi = np.asarray(phi)
    if phi.shape != (space.n_dofs,):
        raise ConfigError(
            f"phi must have one coefficient per DOF ({space.n_dofs}), got {phi.shape}"
        )
    rule = regular_rule(quad_order)
    geom = precompute_geometry(mesh, rule)
    table = basis_table(space, rule)
    dens = np.einsum("ml,lq->mq", phi[space.dofmap], table.values)
    dens = dens * (geom.jacobians[:, None] * rule.weights[None, :])

    d_near = NEAR_FIELD_DIAMETERS * float(geom.diameters.max())
    n_near = 0
    out = np.empty(len(pts), dtype=np.complex128)
    normals = geom.normals[None, :, None, :]
    for lo in range(0, len(pts), chunk_size):
        hi = min(lo + chunk_size, len(pts))
        diff = pts[lo:hi, None, None, :] - geom.qpoints[None, :, :, :]
        r = np.sqrt(np.einsum("cmqi,cmqi->cmq", diff, diff))
        n_near += int(np.count_nonzero(r.min(axis=(1, 2)) < d_near))
        re, im = kernel_planes("dlp", k, diff, r, n_trial=normals)
        kern = re if im is None else re + 1j * im
        out[lo:hi] = np.einsum("cmq,mq->c", kern, dens)
    if n_near:
        warnings.warn(
            f"{n_near} evaluation points lie within {NEAR_FIELD_DIAMETERS:g} "
            "element diameters of the surface; quadrature accuracy degrades "
            "in the near field",
            stacklevel=2,
        )
    return out


def target_strength(u_sct, u0: complex, radius: float):
    """Bistatic target strength 20 log10(R |u_sct / u0|) in dB.

    A vanishing field maps to -inf, reported as such."""
    if radius <= 0.0:
        raise ConfigError(f"radius must be > 0, got {radius}")
    if u0 == 0:
        raise ConfigError("reference amplitude u0 must be nonzero")
    mag = radius * np.abs(np.asarray(u_sct) / u0)
    with np.errstate(divide="ignore"):
        ts = 20.0 * np.log10(mag)
    if np.ndim(u_sct) == 0:
        return float(ts)
    return ts


def deviation(u_a: np.ndarray, u_b: np.ndarray) -> float:
    """Mean relative magnitude deviation (1/n) sum ||a|-|b|| / |b|."""
    a = np.abs(np.asarray(u_a)).ravel()
    b = np.abs(np.asarray(u_b)).ravel()
    if a.shape != b.shape or len(a) == 0:
        raise ConfigError(
            f"fields must have equal nonzero lengths, got {a.shape} and {b.shape}"
        )
    zero = np.nonzero(b == 0.0)[0]
    if len(zero) > 0:
        raise ZeroDivisionError(
            f"reference field vanishes at sample index {int(zero[0])}"
        )
    return float(np.mean(np.abs(a - b) / b))


def write_far_field_csv(path, angles_deg, values, u0: complex, radius: float):
    """Emit one row per observation angle: theta_deg, re, im, abs, ts_db."""
    values = np.asarray(values)
    ts = target_strength(values, u0, radius)
    with open(path, "w", encoding="utf-8") as f:
        f.write("theta_deg,re,im,abs,ts_db\n")
        for ang, u, t in zip(angles_deg, values, np.atleast_1d(ts)):
            f.write(
                f"{ang:.6f},{u.real:.12e},{u.imag:.12e},{abs(u):.12e},{t:.6f}\n"
            )
