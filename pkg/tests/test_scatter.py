import numpy as np
import pytest

from hbem.errors import ConfigError, MeshError, SolverError, SpaceError
from hbem.mesh import TriangleMesh
from hbem.scatter import (
    PlaneWave,
    ScatterConfig,
    burton_miller_solve,
    deviation,
    evaluate_far_field,
    evaluation_ring,
    incidence_direction,
    incident_trace,
    target_strength,
    vertex_normals,
    wavenumber_from_frequency,
    write_far_field_csv,
)
from hbem.spaces import build_space
from oracles import hard_sphere_scattered


class TestWavenumber:
    def test_kilohertz_in_water(self):
        assert wavenumber_from_frequency(1000.0, 1500.0) == pytest.approx(
            2 * np.pi * 1000 / 1500)

    def test_unit_wavenumber(self):
        assert wavenumber_from_frequency(1500.0 / (2 * np.pi), 1500.0) == pytest.approx(1.0)

    def test_doubling_frequency_doubles_k(self):
        assert wavenumber_from_frequency(2000.0, 1500.0) == pytest.approx(
            2 * wavenumber_from_frequency(1000.0, 1500.0))

    def test_validation(self):
        with pytest.raises(ConfigError):
            wavenumber_from_frequency(0.0, 1500.0)
        with pytest.raises(ConfigError):
            wavenumber_from_frequency(1000.0, -1.0)


class TestPlaneWave:
    def test_phase_orthogonal_point(self):
        wave = PlaneWave(2.0, np.array([1.0, 0, 0]), 5.0)
        assert wave.evaluate(np.array([[0.0, 3.0, -1.0]]))[0] == pytest.approx(2.0)

    def test_full_period(self):
        wave = PlaneWave(1.0, np.array([1.0, 0, 0]), 2 * np.pi)
        val = wave.evaluate(np.array([[1.0, 0, 0]]))[0]
        assert val == pytest.approx(1.0 + 0j, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigError):
            PlaneWave(1.0, np.array([1.0, 1.0, 0]), 2.0)
        with pytest.raises(ConfigError):
            PlaneWave(1.0, np.array([1.0, 0]), 2.0)
        with pytest.raises(ConfigError):
            PlaneWave(1.0, np.array([1.0, 0, 0]), 0.0)

    def test_incidence_direction(self):
        assert np.allclose(incidence_direction(0.0), [1, 0, 0])
        assert np.allclose(incidence_direction(90.0), [0, 1, 0], atol=1e-15)
        assert np.allclose(incidence_direction(180.0), [-1, 0, 0], atol=1e-15)


class TestEvaluationRing:
    def test_four_points(self):
        pts, ang = evaluation_ring(4, 2.0)
        assert np.allclose(ang, [0, 90, 180, 270])
        assert np.allclose(pts, [[2, 0, 0], [0, 2, 0], [-2, 0, 0], [0, -2, 0]],
                           atol=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigError):
            evaluation_ring(0, 1.0)
        with pytest.raises(ConfigError):
            evaluation_ring(4, 0.0)


class TestScatterConfig:
    def test_default_wavenumber_is_two(self):
        assert ScatterConfig().wavenumber == pytest.approx(2.0)

    @pytest.mark.parametrize("kwargs", [
        {"frequency": 0.0}, {"sound_speed": 0.0}, {"radius": -1.0},
        {"n_points": 0}, {"sphere_level": -1}, {"tol": 0.0}, {"restart": 0},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            ScatterConfig(**kwargs)


class TestSurfaceTraces:
    def test_vertex_normals_near_radial(self, sphere):
        mesh = sphere(1)
        vn = vertex_normals(mesh)
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        assert np.einsum("ij,ij->i", vn, radial).min() > 0.99

    def test_incident_trace_values(self, sphere):
        mesh = sphere(1)
        sp = build_space(mesh, "p1c")
        wave = PlaneWave(1.0, np.array([1.0, 0, 0]), 2.0)
        u, du = incident_trace(wave, mesh, sp)
        assert np.allclose(u, np.exp(2j * mesh.vertices[:, 0]), atol=1e-14)
        # against the exactly radial normal of the underlying sphere
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        du_radial = 2j * radial[:, 0] * u
        assert np.abs(du - du_radial).max() < 2e-2

    def test_incident_trace_requires_p1c(self, sphere):
        mesh = sphere(1)
        wave = PlaneWave(1.0, np.array([1.0, 0, 0]), 2.0)
        with pytest.raises(SpaceError):
            incident_trace(wave, mesh, build_space(mesh, "p0"))
        with pytest.raises(SpaceError):
            incident_trace(wave, sphere(0), build_space(mesh, "p1c"))


@pytest.fixture(scope="module")
def solved_sphere(sphere):
    cfg = ScatterConfig(sphere_level=2, n_points=72)
    mesh = sphere(2)
    stats = {}
    report = burton_miller_solve(cfg, mode="dense", mesh=mesh, stats=stats)
    points, angles = evaluation_ring(cfg.n_points, cfg.radius)
    space = build_space(mesh, "p1c")
    far = evaluate_far_field(mesh, space, report.phi, points, cfg.wavenumber)
    return cfg, mesh, report, stats, points, angles, far


class TestBurtonMillerSolve:
    def test_convergence_report(self, solved_sphere):
        cfg, mesh, report, stats, _, _, _ = solved_sphere
        assert report.converged
        assert report.residual <= cfg.tol
        assert report.residuals[-1] == report.residual
        assert report.n_dofs == mesh.n_vertices
        assert report.n_elements == mesh.n_elements
        assert set(report.timings) == {"assembly", "solve"}
        assert stats["mode"] == "dense"
        assert stats["elements_per_wavelength"] > 6.0

    def test_matches_separated_variables_solution(self, solved_sphere):
        cfg, _, _, _, points, _, far = solved_sphere
        exact = hard_sphere_scattered(cfg.wavenumber, 1.0, points,
                                      incidence_direction(0.0))
        assert deviation(far, exact) < 0.05

    def test_bistatic_pattern_symmetric_about_incidence_axis(self, solved_sphere):
        cfg, _, _, _, _, angles, far = solved_sphere
        ts = target_strength(far, cfg.amplitude, cfg.radius)
        # theta -> -theta mirrors the geometry when the wave travels along x
        flipped = ts[(-np.arange(len(ts))) % len(ts)]
        assert np.abs(ts - flipped).mean() < 0.01 * (ts.max() - ts.min())

    def test_far_field_csv(self, solved_sphere, tmp_path):
        cfg, _, _, _, _, angles, far = solved_sphere
        path = tmp_path / "far.csv"
        write_far_field_csv(path, angles, far, cfg.amplitude, cfg.radius)
        lines = path.read_text().splitlines()
        assert lines[0] == "theta_deg,re,im,abs,ts_db"
        assert len(lines) == len(far) + 1
        first = [float(v) for v in lines[1].split(",")]
        assert first[0] == 0.0
        assert first[1] == pytest.approx(far[0].real, rel=1e-10)
        assert first[3] == pytest.approx(abs(far[0]), rel=1e-10)

    def test_amplitude_linearity(self, sphere):
        mesh = sphere(1)
        base = dict(sphere_level=1, frequency=1500.0 / (2 * np.pi))  # k = 1
        r1 = burton_miller_solve(ScatterConfig(**base), mesh=mesh)
        r2 = burton_miller_solve(ScatterConfig(amplitude=2.0, **base), mesh=mesh)
        assert np.linalg.norm(r2.phi - 2 * r1.phi) <= 1e-12 * np.linalg.norm(r1.phi)

    def test_resolution_guard(self, sphere):
        mesh = sphere(0)
        cfg = ScatterConfig(sphere_level=0)
        with pytest.raises(SolverError, match="elements per wavelength"):
            burton_miller_solve(cfg, mesh=mesh)
        forced = burton_miller_solve(ScatterConfig(sphere_level=0, force=True),
                                     mesh=mesh)
        assert forced.converged

    def test_open_surface_rejected(self):
        tri = TriangleMesh(
            vertices=np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]),
            elements=np.array([[0, 1, 2]]))
        with pytest.raises(MeshError, match="closed"):
            burton_miller_solve(ScatterConfig(), mesh=tri)

    def test_invalid_mode(self, sphere):
        with pytest.raises(ConfigError, match="mode"):
            burton_miller_solve(ScatterConfig(), mode="sparse", mesh=sphere(2))

    def test_mismatched_wave_rejected(self, sphere):
        wave = PlaneWave(1.0, np.array([1.0, 0, 0]), 3.0)
        with pytest.raises(ConfigError, match="same problem"):
            burton_miller_solve(ScatterConfig(), wave=wave, mesh=sphere(2))


class TestFarFieldEvaluation:
    def test_zero_density_gives_zero_field(self, sphere):
        mesh = sphere(1)
        sp = build_space(mesh, "p1c")
        pts, _ = evaluation_ring(8, 50.0)
        out = evaluate_far_field(mesh, sp, np.zeros(sp.n_dofs), pts, 2.0)
        assert np.array_equal(out, np.zeros(8, dtype=np.complex128))

    def test_linearity_in_density(self, sphere, rng):
        mesh = sphere(1)
        sp = build_space(mesh, "p1c")
        pts, _ = evaluation_ring(8, 50.0)
        phi = rng.standard_normal(sp.n_dofs) + 1j * rng.standard_normal(sp.n_dofs)
        one = evaluate_far_field(mesh, sp, phi, pts, 2.0)
        two = evaluate_far_field(mesh, sp, 2.0 * phi, pts, 2.0)
        assert np.array_equal(two, 2.0 * one)

    def test_static_double_layer_of_constant_vanishes_outside(self, sphere):
        # the exterior solid angle identity, sharpening under refinement
        errs = []
        for level in (1, 2):
            mesh = sphere(level)
            sp = build_space(mesh, "p1c")
            pts, _ = evaluation_ring(8, 5.0)
            out = evaluate_far_field(mesh, sp, np.ones(sp.n_dofs), pts, 0.0)
            errs.append(np.abs(out).max())
        assert errs[1] < 1e-3
        assert errs[1] < errs[0]

    def test_near_field_warning(self, sphere):
        mesh = sphere(1)
        sp = build_space(mesh, "p1c")
        pts, _ = evaluation_ring(8, 1.2)
        with pytest.warns(UserWarning, match="near field"):
            evaluate_far_field(mesh, sp, np.ones(sp.n_dofs), pts, 2.0)

    def test_input_validation(self, sphere):
        mesh = sphere(1)
        sp = build_space(mesh, "p1c")
        with pytest.raises(ConfigError):
            evaluate_far_field(mesh, sp, np.ones(sp.n_dofs), np.zeros((4, 2)), 2.0)
        with pytest.raises(ConfigError):
            evaluate_far_field(mesh, sp, np.ones(3), np.zeros((4, 3)), 2.0)


class TestTargetStrength:
    def test_free_space_spreading_reference(self):
        assert target_strength(1.0 / 50.0, 1.0, 50.0) == pytest.approx(0.0)

    def test_long_range(self):
        assert target_strength(1.0, 1.0, 20000.0) == pytest.approx(86.0206, abs=1e-4)

    def test_doubling_adds_six_db(self):
        base = target_strength(0.01, 1.0, 100.0)
        assert target_strength(0.02, 1.0, 100.0) - base == pytest.approx(
            6.0206, abs=1e-4)

    def test_silence_is_minus_infinity(self):
        assert target_strength(0.0, 1.0, 100.0) == -np.inf

    def test_scalar_in_scalar_out(self):
        assert isinstance(target_strength(0.5, 1.0, 10.0), float)

    def test_validation(self):
        with pytest.raises(ConfigError):
            target_strength(1.0, 0.0, 100.0)
        with pytest.raises(ConfigError):
            target_strength(1.0, 1.0, -5.0)


class TestDeviation:
    def test_identical_fields(self, rng):
        u = rng.standard_normal(10) + 1j * rng.standard_normal(10)
        assert deviation(u, u) == 0.0

    def test_one_percent_offset(self, rng):
        u = rng.standard_normal(10) + 1j * rng.standard_normal(10)
        assert deviation(1.01 * u, u) == pytest.approx(0.01, rel=1e-10)

    def test_vanishing_reference_names_index(self):
        b = np.array([1.0, 2.0, 0.0, 3.0])
        with pytest.raises(ZeroDivisionError, match="index 2"):
            deviation(np.ones(4), b)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            deviation(np.ones(3), np.ones(4))
