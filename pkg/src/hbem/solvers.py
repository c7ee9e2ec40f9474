"""Matrix-free iterative solvers.

A restarted GMRES implementation with modified Gram-Schmidt Arnoldi and
complex-safe Givens rotations.  Written against a bare matvec callable so
dense arrays, hierarchical matrices, and composed operators all plug in
unchanged, with a per-iteration residual history for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import SolverError


@dataclass(frozen=True)
class GmresResult:
    """Outcome of a restarted GMRES run.

    residuals holds the relative residual estimate after every inner
    iteration (the Givens-rotation recurrence value divided by ||b||)."""

    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    residuals: tuple[float, ...]
    restarts: int


def _givens(h0, h1):
    """Rotation (c real, s same dtype as input) zeroing h1 against h0."""
    a0, a1 = np.abs(h0), np.abs(h1)
    if a1 == 0.0:
        return 1.0, h1 * 0
    if a0 == 0.0:
        return 0.0, np.conj(h1) / a1
    r = float(np.hypot(a0, a1))
    c = float(a0 / r)
    s = (h0 / a0) * (np.conj(h1) / r)
    return c, s


def gmres(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-5,
    restart: int = 100,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
) -> GmresResult:
    """Solve A x = b with restarted GMRES(restart).

    Stops when the relative residual ||b - A x|| / ||b|| drops below tol
    or after max_iter total inner iterations (default: 20 restart cycles).
    Never raises on stagnation; the caller inspects `converged`."""
    b = np.asarray(b)
    if b.ndim != 1:
        raise SolverError(f"right-hand side must be a vector, got shape {b.shape}")
    if restart < 1:
        raise SolverError(f"restart must be >= 1, got {restart}")
    n = b.shape[0]
    if max_iter is None:
        max_iter = 20 * restart
    dtype = np.result_type(b.dtype, np.float64)
    x = np.zeros(n, dtype=dtype) if x0 is None else np.asarray(x0, dtype=dtype).copy()
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return GmresResult(np.zeros(n, dtype=dtype), True, 0, 0.0, (0.0,), 0)

    history: list[float] = []
    total_iters = 0
    restarts = 0
    converged = False

    while total_iters < max_iter and not converged:
        r = b - np.asarray(matvec(x), dtype=dtype)
        beta = float(np.linalg.norm(r))
        if beta / norm_b <= tol:
            converged = True
            if not history:
                history.append(beta / norm_b)
            break
        m = min(restart, max_iter - total_iters)
        v = np.empty((m + 1, n), dtype=dtype)
        h = np.zeros((m + 1, m), dtype=dtype)
        cs = np.empty(m, dtype=np.float64)
        sn = np.empty(m, dtype=dtype)
        g = np.zeros(m + 1, dtype=dtype)
        g[0] = beta
        v[0] = r / beta
        j_done = 0
        for j in range(m):
            # copy: matvec may return its argument or a reused buffer
            w = np.array(matvec(v[j]), dtype=dtype)
            for i in range(j + 1):
                h[i, j] = np.vdot(v[i], w)
                w -= h[i, j] * v[i]
            norm_w = float(np.linalg.norm(w))
            h[j + 1, j] = norm_w
            for i in range(j):
                t = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
                h[i + 1, j] = -np.conj(sn[i]) * h[i, j] + cs[i] * h[i + 1, j]
                h[i, j] = t
            c, s = _givens(h[j, j], h[j + 1, j])
            cs[j], sn[j] = c, s
            h[j, j] = c * h[j, j] + s * h[j + 1, j]
            h[j + 1, j] = 0.0
            g[j + 1] = -np.conj(s) * g[j]
            g[j] = c * g[j]
            total_iters += 1
            j_done = j + 1
            rel = float(abs(g[j + 1])) / norm_b
            history.append(rel)
            if rel <= tol:
                converged = True
                break
            if norm_w == 0.0:
                # invariant Krylov space: the inner solve below is exact
                break
            if j + 1 < m:
                v[j + 1] = w / norm_w
        if j_done > 0:
            y = np.zeros(j_done, dtype=dtype)
            for i in range(j_done - 1, -1, -1):
                y[i] = (g[i] - h[i, i + 1 : j_done] @ y[i + 1 : j_done]) / h[i, i]
            x = x + y @ v[:j_done]
        restarts += 1

    final = float(history[-1]) if history else 0.0
    return GmresResult(x, converged, total_iters, final, tuple(history), restarts)
