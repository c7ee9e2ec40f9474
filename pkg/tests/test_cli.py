import json

import numpy as np
import pytest

from hbem.cli import (
    BENCHMARK_DEFAULTS,
    SCATTER_DEFAULTS,
    _load_config,
    build_parser,
    main,
    speedup,
)
from hbem.errors import ConfigError


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def strip_timings(report):
    """Remove wall-clock fields so two runs can be compared for determinism."""
    out = json.loads(json.dumps(report))
    for run in out["runs"]:
        for key in ("times_s", "mean_s", "std_s"):
            run.pop(key, None)
    for s in out["speedups"]:
        for key in ("t_reference_mean_s", "t_batched_mean_s", "s"):
            s.pop(key, None)
    return out


class TestSpeedup:
    def test_measured_example(self):
        assert speedup(2275.0, 1206.0) == pytest.approx(1.8864, abs=1e-4)

    def test_equal_times(self):
        assert speedup(5.0, 5.0) == 1.0

    def test_nonpositive_rejected(self):
        with pytest.raises(ConfigError):
            speedup(0.0, 1.0)
        with pytest.raises(ConfigError):
            speedup(1.0, -2.0)


class TestLoadConfig:
    def test_defaults_when_no_file(self):
        assert _load_config(None, BENCHMARK_DEFAULTS) == BENCHMARK_DEFAULTS

    def test_overrides_applied(self, tmp_path):
        path = write_config(tmp_path, "c.json", {"levels": [0], "repetitions": 2})
        cfg = _load_config(path, BENCHMARK_DEFAULTS)
        assert cfg["levels"] == [0]
        assert cfg["repetitions"] == 2
        assert cfg["space"] == BENCHMARK_DEFAULTS["space"]

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, "c.json", {"levls": [0]})
        with pytest.raises(ConfigError, match="levls"):
            _load_config(path, BENCHMARK_DEFAULTS)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            _load_config(str(tmp_path / "absent.json"), BENCHMARK_DEFAULTS)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            _load_config(str(path), BENCHMARK_DEFAULTS)

    def test_non_object_root(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="JSON object"):
            _load_config(str(path), BENCHMARK_DEFAULTS)


TINY_BENCH = {
    "levels": [0],
    "equations": ["laplace"],
    "repetitions": 2,
}


class TestBenchmarkCommand:
    def test_tiny_sweep_writes_complete_report(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", TINY_BENCH)
        out = tmp_path / "out"
        assert main(["benchmark", "--config", cfg, "--out", str(out)]) == 0

        report = json.loads((out / "report.json").read_text())
        assert report["schema_version"] == 1
        assert report["kind"] == "benchmark"
        assert report["valid"] is True
        assert "batching" in report["framing"] or "pipeline" in report["framing"]
        assert len(report["runs"]) == 2  # reference and batched-backend
        for run in report["runs"]:
            for key in ("operator", "equation", "precision", "level", "n_elements",
                        "n_dofs", "mode", "path", "repetitions", "times_s",
                        "mean_s", "std_s", "probe_rel_err", "valid"):
                assert key in run
            assert run["valid"] is True
            assert len(run["times_s"]) == 2
        assert len(report["speedups"]) == 1
        assert report["speedups"][0]["s"] > 0

        csv_lines = (out / "benchmark_runs.csv").read_text().splitlines()
        assert csv_lines[0] == ("operator,equation,precision,level,n_elements,"
                                "n_dofs,mode,path,repetitions,mean_s,std_s,"
                                "probe_rel_err,valid")
        assert len(csv_lines) == 1 + len(report["runs"])

    def test_reference_only_run_has_no_speedups(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", dict(TINY_BENCH, paths=["reference"]))
        out = tmp_path / "out"
        assert main(["benchmark", "--config", cfg, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["speedups"] == []

    def test_hmatrix_mode_reports_compression(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", dict(TINY_BENCH, repetitions=1))
        out = tmp_path / "out"
        code = main(["benchmark", "--config", cfg, "--mode", "hmatrix",
                     "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["modes"] == ["hmatrix"]
        assert all(r["mode"] == "hmatrix" for r in report["runs"])
        assert all(r["path"] == "batched-backend" for r in report["runs"])
        assert all("compression_ratio" in r for r in report["runs"])

    def test_failed_probe_is_a_numerical_failure(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", dict(
            TINY_BENCH, repetitions=1, space="p1c",
            paths=["batched-backend"], probe_tol_double=1e-300))
        out = tmp_path / "out"
        assert main(["benchmark", "--config", cfg, "--out", str(out)]) == 3
        report = json.loads((out / "report.json").read_text())
        assert report["valid"] is False
        assert any(r["valid"] is False for r in report["runs"])

    def test_deterministic_apart_from_timings(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", TINY_BENCH)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["benchmark", "--config", cfg, "--out", str(out1)]) == 0
        assert main(["benchmark", "--config", cfg, "--out", str(out2)]) == 0
        r1 = strip_timings(json.loads((out1 / "report.json").read_text()))
        r2 = strip_timings(json.loads((out2 / "report.json").read_text()))
        assert r1 == r2

    def test_multi_level_probe_only_at_smallest(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", dict(
            TINY_BENCH, levels=[0, 1], repetitions=1, paths=["batched-backend"]))
        out = tmp_path / "out"
        assert main(["benchmark", "--config", cfg, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        by_level = {r["level"]: r for r in report["runs"]}
        assert by_level[0]["probe_rel_err"] is not None
        assert by_level[1]["probe_rel_err"] is None
        assert by_level[1]["valid"] is True

    def test_hyps_needs_linear_space(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", dict(TINY_BENCH, operators=["hyps"]))
        assert main(["benchmark", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", {"levels": [0], "oops": 1})
        assert main(["benchmark", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_bad_choice_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "b.json", dict(TINY_BENCH, equations=["stokes"]))
        assert main(["benchmark", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


TINY_SCATTER = {
    "sphere_level": 1,
    "wavenumber": 1.0,
    "n_points": 36,
}


class TestScatterCommand:
    def test_run_writes_csv_and_report(self, tmp_path):
        cfg = write_config(tmp_path, "s.json", TINY_SCATTER)
        out = tmp_path / "out"
        assert main(["scatter", "--config", cfg, "--out", str(out)]) == 0

        lines = (out / "far_field.csv").read_text().splitlines()
        assert lines[0] == "theta_deg,re,im,abs,ts_db"
        assert len(lines) == 37

        report = json.loads((out / "report.json").read_text())
        assert report["kind"] == "scatter"
        assert report["config"]["wavenumber"] == pytest.approx(1.0)
        assert report["config"]["frequency"] == pytest.approx(1500.0 / (2 * np.pi))
        res = report["result"]
        assert res["converged"] is True
        assert res["mode"] == "dense"
        assert res["n_elements"] == 80
        assert set(res["timings_s"]) == {"assembly", "solve", "far_field"}
        assert report["outputs"]["far_field_csv"] == "far_field.csv"

    def test_mode_and_workers_overrides_land_in_report(self, tmp_path):
        cfg = write_config(tmp_path, "s.json", TINY_SCATTER)
        out = tmp_path / "out"
        code = main(["scatter", "--config", cfg, "--mode", "hmatrix",
                     "--workers", "2", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["mode"] == "hmatrix"
        assert report["config"]["workers"] == 2
        assert report["result"]["mode"] == "hmatrix"

    def test_frequency_and_wavenumber_conflict(self, tmp_path):
        cfg = write_config(tmp_path, "s.json",
                           dict(TINY_SCATTER, frequency=1000.0))
        assert main(["scatter", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_resolution_guard_maps_to_exit_3(self, tmp_path):
        cfg = write_config(tmp_path, "s.json",
                           dict(TINY_SCATTER, sphere_level=0, wavenumber=2.0))
        assert main(["scatter", "--config", cfg, "--out", str(tmp_path / "o")]) == 3

    def test_force_overrides_guard(self, tmp_path):
        cfg = write_config(tmp_path, "s.json",
                           dict(TINY_SCATTER, sphere_level=0, wavenumber=2.0))
        out = tmp_path / "out"
        assert main(["scatter", "--config", cfg, "--force", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["result"]["converged"] is True

    def test_unknown_key(self, tmp_path):
        cfg = write_config(tmp_path, "s.json", {"wavelength": 3.0})
        assert main(["scatter", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_single_precision_refused_by_parser(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["scatter", "--precision", "single"])
        assert exc.value.code == 2

    def test_defaults_have_no_frequency_or_wavenumber(self):
        assert SCATTER_DEFAULTS["frequency"] is None
        assert SCATTER_DEFAULTS["wavenumber"] is None


class TestParser:
    def test_help_documents_outputs_and_exit_codes(self):
        text = build_parser().format_help()
        assert "theta_deg,re,im,abs,ts_db" in text
        assert "exit codes" in text
        assert "3  numerical failure" in text

    def test_subcommand_required(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2
