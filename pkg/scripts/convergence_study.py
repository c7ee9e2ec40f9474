#!/usr/bin/env python3
"""Mesh refinement study for the layer potentials on the unit sphere.

Two classical identities with known targets are tracked per level:

  * the total single-layer charge 1^T S 1, which tends to 4 pi for the
    unit sphere with a constant unit density; this error falls roughly
    like h^2 under uniform refinement,
  * the jump relation K 1 = -1/2 M 1 of the double-layer operator, which
    holds exactly on any closed polyhedral surface, so its sup-norm
    residual tracks the quadrature accuracy rather than the mesh size.
"""

import argparse
import time

import numpy as np

from hbem.assembly import AssemblyConfig, assemble_dense
from hbem.backend import make_host_backends
from hbem.kernels import OperatorSpec, make_integration_context
from hbem.mesh import precompute_geometry, refine_unit_sphere
from hbem.quadrature import regular_rule
from hbem.spaces import assemble_mass, build_space


def dense(spec, space, cfg):
    ctx = make_integration_context(
        spec, space, space, cfg.regular_order, cfg.singular_base_order
    )
    return assemble_dense(spec, space, space, cfg, make_host_backends(ctx))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3],
                    help="icosphere refinement levels (default: 1 2 3)")
    ap.add_argument("--equation", choices=["laplace", "helmholtz"],
                    default="laplace")
    ap.add_argument("--wavenumber", type=float, default=2.0,
                    help="wavenumber for the Helmholtz variant")
    args = ap.parse_args()

    k = args.wavenumber if args.equation == "helmholtz" else 0.0
    cfg = AssemblyConfig()
    print(f"{'level':>5} {'elems':>6} {'|1^T S 1 - 4pi|/4pi':>20} "
          f"{'jump residual':>14} {'seconds':>8}")
    prev = None  # previous charge error, for the refinement rate
    for level in args.levels:
        t0 = time.perf_counter()
        mesh = refine_unit_sphere(level)

        p0 = build_space(mesh, "p0")
        s = dense(OperatorSpec(args.equation, "slp", wavenumber=k), p0, cfg)
        ones = np.ones(p0.n_dofs)
        total = ones @ s @ ones
        # the 4 pi target is exact only for the static kernel
        charge = abs(total - 4 * np.pi) / (4 * np.pi) if k == 0.0 else np.nan

        p1c = build_space(mesh, "p1c")
        kk = dense(OperatorSpec(args.equation, "dlp", wavenumber=k), p1c, cfg)
        geom = precompute_geometry(mesh, regular_rule(cfg.regular_order))
        m = assemble_mass(p1c, p1c, geom, regular_rule(2)).tocsr()
        m1 = m @ np.ones(p1c.n_dofs)
        jump = float(np.abs(kk @ np.ones(p1c.n_dofs) + 0.5 * m1).max()
                     / np.abs(m1).max())

        dt = time.perf_counter() - t0
        rate = "" if prev is None or not np.isfinite(charge) else \
            f"  (charge x{prev / charge:.1f})"
        prev = charge
        print(f"{level:>5} {mesh.n_elements:>6} {charge:>20.3e} "
              f"{jump:>14.3e} {dt:>8.1f}{rate}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
