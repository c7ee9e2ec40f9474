"""Command-line drivers: benchmark harness and scattering application.

`hbem benchmark` sweeps operator assemblies over sphere refinements,
timing the per-pair reference path against the batched-backend path and
reporting speed-up factors; `hbem scatter` runs the Burton-Miller solve
and writes the bistatic far field.  Both emit versioned JSON reports with
the fully resolved configuration embedded.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .assembly import AssemblyConfig, assemble_dense, assemble_dense_reference
from .backend import make_host_backends
from .errors import (
    AssemblyError,
    ConfigError,
    ContractViolationError,
    HbemError,
    SolverError,
)
from .hmatrix import (
    AcaConfig,
    assemble_hmatrix,
    cluster_trees_for,
    compression_stats,
    hmat_matvec,
)
from .kernels import EQUATIONS, OPERATORS, PRECISIONS, OperatorSpec, make_integration_context
from .mesh import refine_unit_sphere
from .scatter import (
    ScatterConfig,
    burton_miller_solve,
    evaluate_far_field,
    evaluation_ring,
    wavenumber_from_frequency,
    write_far_field_csv,
)
from .spaces import build_space
from .solvers import gmres  # noqa: F401  (re-exported for driver scripts)

SCHEMA_VERSION = 1

SPEEDUP_FRAMING = (
    "speed-up S = t_reference / t_batched compares the per-pair host "
    "integrator against the batched-backend pipeline on the same hardware; "
    "it measures the architectural benefit of batching, not accelerator "
    "silicon"
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

BENCHMARK_DEFAULTS = {
    "levels": [1],
    "operators": ["slp"],
    "equations": ["laplace", "helmholtz"],
    "wavenumber": 2.0,
    "space": "p0",
    "modes": ["dense"],
    "paths": ["reference", "batched-backend"],
    "precisions": ["double"],
    "repetitions": 5,
    "seed": 0,
    "chunk_size": 1 << 20,
    "workers": 1,
    "devices": 1,
    "regular_order": 4,
    "singular_base_order": 4,
    "epsilon": 1e-5,
    "eta": 2.0,
    "n_min": 32,
    "probe_tol_double": 1e-8,
    "probe_tol_single": 1e-3,
}

SCATTER_DEFAULTS = {
    "frequency": None,
    "wavenumber": None,  # neither given: defaults to k = 2
    "sound_speed": 1500.0,
    "sphere_level": 3,
    "mesh_file": None,
    "amplitude": 1.0,
    "theta_inc_deg": 0.0,
    "radius": 100.0,
    "n_points": 3600,
    "tol": 1e-5,
    "restart": 100,
    "max_iter": None,
    "mode": "dense",
    "force": False,
    "chunk_size": 1 << 20,
    "workers": 1,
    "devices": 1,
    "regular_order": 4,
    "singular_base_order": 4,
    "epsilon": 1e-5,
    "threshold": 10000,
    "eta": 2.0,
    "n_min": 32,
}


def speedup(t_ref: float, t_acc: float) -> float:
    """S = t_ref / t_acc."""
    if t_ref <= 0.0 or t_acc <= 0.0:
        raise ConfigError(f"timings must be positive, got {t_ref}, {t_acc}")
    return t_ref / t_acc


def _load_config(path: str | None, defaults: dict) -> dict:
    cfg = dict(defaults)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a JSON object, got {type(data).__name__}")
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ConfigError(
                f"unknown config keys {unknown}; known keys: {sorted(defaults)}"
            )
        cfg.update(data)
    return cfg


def _validate_choices(name: str, values, allowed):
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ConfigError(f"{name} contains {bad}; allowed: {sorted(allowed)}")
    if not values:
        raise ConfigError(f"{name} must not be empty")


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _benchmark_cells(cfg: dict):
    """Deterministic run order: one cell per timed assembly variant."""
    for op in cfg["operators"]:
        for eq in cfg["equations"]:
            for prec in cfg["precisions"]:
                for level in cfg["levels"]:
                    for mode in cfg["modes"]:
                        if mode == "dense":
                            for path in cfg["paths"]:
                                yield op, eq, prec, level, mode, path
                        else:
                            yield op, eq, prec, level, mode, "batched-backend"


def run_benchmark(cfg: dict, out_dir: Path) -> tuple[dict, int]:
    """Execute the benchmark sweep and write report.json + runs CSV."""
    _validate_choices("operators", cfg["operators"], set(OPERATORS))
    _validate_choices("equations", cfg["equations"], set(EQUATIONS))
    _validate_choices("precisions", cfg["precisions"], set(PRECISIONS))
    _validate_choices("modes", cfg["modes"], {"dense", "hmatrix"})
    _validate_choices("paths", cfg["paths"], {"reference", "batched-backend"})
    if not cfg["levels"]:
        raise ConfigError("levels must not be empty")
    if cfg["repetitions"] < 1:
        raise ConfigError(f"repetitions must be >= 1, got {cfg['repetitions']}")
    if "hyps" in cfg["operators"] and cfg["space"] == "p0":
        raise ConfigError("the hypersingular operator needs a linear space, set 'space'")

    acfg = AssemblyConfig(
        chunk_size=cfg["chunk_size"],
        workers=cfg["workers"],
        regular_order=cfg["regular_order"],
        singular_base_order=cfg["singular_base_order"],
    )
    aca_cfg = AcaConfig(epsilon=cfg["epsilon"])
    min_level = min(cfg["levels"])
    rng = np.random.default_rng(cfg["seed"])

    meshes = {lvl: refine_unit_sphere(lvl) for lvl in sorted(set(cfg["levels"]))}
    spaces = {lvl: build_space(meshes[lvl], cfg["space"]) for lvl in meshes}
    probes: dict = {}  # (op, eq, prec) -> (x, y_reference) at min_level

    runs = []
    all_valid = True
    for op, eq, prec, level, mode, path in _benchmark_cells(cfg):
        k = cfg["wavenumber"] if eq == "helmholtz" else 0.0
        spec = OperatorSpec(eq, op, wavenumber=k, precision=prec)
        sp = spaces[level]
        times = []
        apply_fn = None
        extra = {}
        for _ in range(cfg["repetitions"]):
            t0 = time.perf_counter()
            if mode == "dense" and path == "reference":
                a = assemble_dense_reference(spec, sp, sp, acfg)
                apply_fn = a.__matmul__
            elif mode == "dense":
                ctx = make_integration_context(
                    spec, sp, sp, acfg.regular_order, acfg.singular_base_order
                )
                backends = make_host_backends(ctx, cfg["devices"])
                a = assemble_dense(spec, sp, sp, acfg, backends)
                apply_fn = a.__matmul__
            else:
                tree = cluster_trees_for(sp, sp, n_min=cfg["n_min"], eta=cfg["eta"])
                ctx = make_integration_context(
                    spec, sp, sp, acfg.regular_order, acfg.singular_base_order
                )
                backends = make_host_backends(ctx, cfg["devices"])
                h = assemble_hmatrix(
                    spec, sp, sp, tree, aca_cfg, backends, assembly_config=acfg
                )
                apply_fn = lambda x, _h=h: hmat_matvec(_h, x)
                cs = compression_stats(h)
                extra["compression_ratio"] = cs.ratio
            times.append(time.perf_counter() - t0)

        probe_err = None
        valid = True
        if level == min_level:
            key = (op, eq, prec)
            if key not in probes:
                ref = assemble_dense_reference(spec, spaces[min_level], spaces[min_level], acfg)
                x = rng.standard_normal(spaces[min_level].n_dofs)
                probes[key] = (x, ref @ x)
            x, y_ref = probes[key]
            y = apply_fn(x)
            probe_err = float(
                np.linalg.norm(y - y_ref) / max(np.linalg.norm(y_ref), 1e-300)
            )
            tol = cfg["probe_tol_double"] if prec == "double" else cfg["probe_tol_single"]
            if mode == "hmatrix":
                tol = max(tol, 10.0 * cfg["epsilon"])
            valid = probe_err <= tol
            if not valid:
                all_valid = False
        mean = float(np.mean(times))
        std = float(np.std(times, ddof=1)) if len(times) > 1 else 0.0
        runs.append({
            "operator": op,
            "equation": eq,
            "precision": prec,
            "level": level,
            "n_elements": meshes[level].n_elements,
            "n_dofs": sp.n_dofs,
            "mode": mode,
            "path": path,
            "repetitions": cfg["repetitions"],
            "times_s": [float(t) for t in times],
            "mean_s": mean,
            "std_s": std,
            "probe_rel_err": probe_err,
            "valid": valid,
            **extra,
        })

    speedups = []
    for op in cfg["operators"]:
        for eq in cfg["equations"]:
            for prec in cfg["precisions"]:
                for level in cfg["levels"]:
                    pick = {
                        r["path"]: r for r in runs
                        if r["operator"] == op and r["equation"] == eq
                        and r["precision"] == prec and r["level"] == level
                        and r["mode"] == "dense"
                    }
                    if "reference" in pick and "batched-backend" in pick:
                        speedups.append({
                            "operator": op,
                            "equation": eq,
                            "precision": prec,
                            "level": level,
                            "t_reference_mean_s": pick["reference"]["mean_s"],
                            "t_batched_mean_s": pick["batched-backend"]["mean_s"],
                            "s": speedup(
                                pick["reference"]["mean_s"],
                                pick["batched-backend"]["mean_s"],
                            ),
                        })

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "benchmark",
        "framing": SPEEDUP_FRAMING,
        "config": cfg,
        "runs": runs,
        "speedups": speedups,
        "valid": all_valid,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    with open(out_dir / "benchmark_runs.csv", "w", encoding="utf-8") as f:
        f.write("operator,equation,precision,level,n_elements,n_dofs,mode,path,"
                "repetitions,mean_s,std_s,probe_rel_err,valid\n")
        for r in runs:
            probe = "" if r["probe_rel_err"] is None else f"{r['probe_rel_err']:.6e}"
            f.write(
                f"{r['operator']},{r['equation']},{r['precision']},{r['level']},"
                f"{r['n_elements']},{r['n_dofs']},{r['mode']},{r['path']},"
                f"{r['repetitions']},{r['mean_s']:.6f},{r['std_s']:.6f},"
                f"{probe},{int(r['valid'])}\n"
            )
    return report, EXIT_OK if all_valid else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# scatter
# ---------------------------------------------------------------------------


def run_scatter(cfg: dict, out_dir: Path) -> tuple[dict, int]:
    """Solve the scattering problem and write far_field.csv + report.json."""
    if cfg["mode"] not in ("dense", "hmatrix"):
        raise ConfigError(f"mode must be 'dense' or 'hmatrix', got {cfg['mode']!r}")
    if cfg["frequency"] is not None and cfg["wavenumber"] is not None:
        raise ConfigError("set either frequency or wavenumber, not both")
    if cfg["frequency"] is not None:
        freq = float(cfg["frequency"])
    else:
        k = 2.0 if cfg["wavenumber"] is None else float(cfg["wavenumber"])
        freq = k * cfg["sound_speed"] / (2.0 * np.pi)

    sc = ScatterConfig(
        frequency=freq,
        sound_speed=cfg["sound_speed"],
        sphere_level=cfg["sphere_level"],
        mesh_file=cfg["mesh_file"],
        amplitude=cfg["amplitude"],
        theta_inc_deg=cfg["theta_inc_deg"],
        radius=cfg["radius"],
        n_points=cfg["n_points"],
        tol=cfg["tol"],
        restart=cfg["restart"],
        max_iter=cfg["max_iter"],
        eta=cfg["eta"],
        n_min=cfg["n_min"],
        force=cfg["force"],
        assembly=AssemblyConfig(
            chunk_size=cfg["chunk_size"],
            workers=cfg["workers"],
            regular_order=cfg["regular_order"],
            singular_base_order=cfg["singular_base_order"],
            devices=cfg["devices"],
        ),
        aca=AcaConfig(epsilon=cfg["epsilon"], threshold=cfg["threshold"]),
    )
    mesh = sc.build_mesh()
    stats: dict = {}
    rep = burton_miller_solve(sc, mode=cfg["mode"], mesh=mesh, stats=stats)
    p1c = build_space(mesh, "p1c")
    pts, ang = evaluation_ring(sc.n_points, sc.radius)
    t0 = time.perf_counter()
    u = evaluate_far_field(mesh, p1c, rep.phi, pts, sc.wavenumber)
    rep.timings["far_field"] = time.perf_counter() - t0

    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "far_field.csv"
    write_far_field_csv(csv_path, ang, u, sc.amplitude, sc.radius)
    resolved = dict(cfg)
    resolved["frequency"] = freq
    resolved["wavenumber"] = wavenumber_from_frequency(freq, cfg["sound_speed"])
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "scatter",
        "config": resolved,
        "result": {
            "converged": rep.converged,
            "iterations": rep.iterations,
            "residual": rep.residual,
            "wavenumber": rep.wavenumber,
            "n_dofs": rep.n_dofs,
            "n_elements": rep.n_elements,
            "mode": rep.mode,
            "timings_s": {k: float(v) for k, v in rep.timings.items()},
            "elements_per_wavelength": stats.get("elements_per_wavelength"),
        },
        "outputs": {"far_field_csv": csv_path.name},
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    return report, EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

_EPILOG = """\
outputs:
  benchmark: report.json plus benchmark_runs.csv with columns
    operator,equation,precision,level,n_elements,n_dofs,mode,path,
    repetitions,mean_s,std_s,probe_rel_err,valid
  scatter: report.json plus far_field.csv with columns
    theta_deg,re,im,abs,ts_db

exit codes:
  0  success
  2  configuration error (bad flags, config schema, invalid mesh)
  3  numerical failure (solver non-convergence, failed correctness probe)
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hbem",
        description="Galerkin boundary-element benchmark and scattering drivers.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults applied per key)")
    common.add_argument("--mode", choices=["dense", "hmatrix"],
                        help="operator representation override")
    common.add_argument("--workers", type=int, help="worker thread count override")
    common.add_argument("--devices", type=int, help="backend device count override")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")

    b = sub.add_parser("benchmark", parents=[common],
                       help="time reference vs batched assembly paths",
                       epilog=_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    b.add_argument("--precision", choices=["double", "single"],
                   help="restrict the sweep to one precision")

    s = sub.add_parser("scatter", parents=[common],
                       help="Burton-Miller scattering run with far-field output",
                       epilog=_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--precision", choices=["double"],
                   help="scatter runs are double precision only")
    s.add_argument("--force", action="store_true",
                   help="proceed below 6 elements per wavelength")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out_dir = Path(args.out)
        if args.command == "benchmark":
            cfg = _load_config(args.config, BENCHMARK_DEFAULTS)
            if args.mode:
                cfg["modes"] = [args.mode]
            if args.precision:
                cfg["precisions"] = [args.precision]
            if args.workers is not None:
                cfg["workers"] = args.workers
            if args.devices is not None:
                cfg["devices"] = args.devices
            report, code = run_benchmark(cfg, out_dir)
            n_ok = sum(r["valid"] for r in report["runs"])
            print(f"benchmark: {len(report['runs'])} runs, {n_ok} valid; "
                  f"report in {out_dir}")
            for s_ in report["speedups"]:
                print(f"  {s_['operator']}/{s_['equation']}/{s_['precision']}"
                      f"/level {s_['level']}: S = {s_['s']:.3f}")
            return code
        else:
            cfg = _load_config(args.config, SCATTER_DEFAULTS)
            if args.mode:
                cfg["mode"] = args.mode
            if args.workers is not None:
                cfg["workers"] = args.workers
            if args.devices is not None:
                cfg["devices"] = args.devices
            if args.force:
                cfg["force"] = True
            report, code = run_scatter(cfg, out_dir)
            res = report["result"]
            print(f"scatter: {res['mode']} mode, {res['iterations']} iterations, "
                  f"residual {res['residual']:.3e}; outputs in {out_dir}")
            return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ContractViolationError, AssemblyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HbemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
