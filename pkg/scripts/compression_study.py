#!/usr/bin/env python3
"""Accuracy/storage trade-off of the hierarchical representation.

Assembles one boundary operator densely and as an ACA-compressed
hierarchical matrix over a sweep of stopping tolerances, reporting the
storage ratio, the achieved matrix-vector accuracy against the dense
operator, and wall time per assembly.
"""

import argparse
import time

import numpy as np

from hbem.assembly import AssemblyConfig, assemble_dense
from hbem.backend import make_host_backends
from hbem.hmatrix import (
    AcaConfig,
    assemble_hmatrix,
    cluster_trees_for,
    compression_stats,
    hmat_matvec,
)
from hbem.kernels import OperatorSpec, make_integration_context
from hbem.mesh import refine_unit_sphere
from hbem.spaces import build_space


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=3,
                    help="icosphere refinement level (default: 3)")
    ap.add_argument("--epsilons", type=float, nargs="+",
                    default=[1e-3, 1e-5, 1e-7])
    ap.add_argument("--equation", choices=["laplace", "helmholtz"],
                    default="helmholtz")
    ap.add_argument("--operator", choices=["slp", "dlp", "adlp"],
                    default="slp")
    ap.add_argument("--wavenumber", type=float, default=2.0)
    ap.add_argument("--space", choices=["p0", "p1c", "p1d"], default="p0")
    args = ap.parse_args()

    k = args.wavenumber if args.equation == "helmholtz" else 0.0
    spec = OperatorSpec(args.equation, args.operator, wavenumber=k)
    mesh = refine_unit_sphere(args.level)
    space = build_space(mesh, args.space)
    cfg = AssemblyConfig()
    ctx = make_integration_context(
        spec, space, space, cfg.regular_order, cfg.singular_base_order
    )
    backends = make_host_backends(ctx)

    t0 = time.perf_counter()
    a = assemble_dense(spec, space, space, cfg, backends)
    t_dense = time.perf_counter() - t0
    print(f"{args.equation} {args.operator} on {space.n_dofs} DOFs "
          f"({mesh.n_elements} elements); dense assembly {t_dense:.1f}s")

    rng = np.random.default_rng(0)
    x = rng.standard_normal(space.n_dofs)
    if spec.is_complex:
        x = x + 1j * rng.standard_normal(space.n_dofs)
    ax = a @ x
    tree = cluster_trees_for(space, space)

    print(f"{'epsilon':>9} {'storage':>8} {'matvec rel err':>15} "
          f"{'max rank':>8} {'seconds':>8}")
    for eps in args.epsilons:
        t0 = time.perf_counter()
        h = assemble_hmatrix(spec, space, space, tree, AcaConfig(epsilon=eps))
        dt = time.perf_counter() - t0
        st = compression_stats(h)
        err = np.linalg.norm(hmat_matvec(h, x) - ax) / np.linalg.norm(ax)
        rank = max(st.rank_histogram, default=0)
        print(f"{eps:>9.0e} {st.ratio:>8.3f} {err:>15.3e} "
              f"{rank:>8} {dt:>8.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
