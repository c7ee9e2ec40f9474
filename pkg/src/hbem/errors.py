"""Exception hierarchy shared by all hbem modules.

Every error raised on a public code path derives from :class:`HbemError`
so callers can catch library failures without trapping programming bugs.
"""

from __future__ import annotations


class HbemError(Exception):
    """Base class for all errors raised by hbem."""


class MeshError(HbemError):
    """Invalid mesh topology or geometry (degenerate element, open or
    inconsistently oriented surface, bad connectivity)."""


class MeshParseError(MeshError):
    """Malformed mesh file.  Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None, section: str | None = None):
        loc = []
        if section is not None:
            loc.append(f"section {section}")
        if line is not None:
            loc.append(f"line {line}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.section = section


class GeometryError(MeshError):
    """Geometric quantity could not be computed (zero-area element etc.)."""


class QuadratureError(HbemError):
    """Unsupported quadrature order or invalid rule construction."""


class SpaceError(HbemError):
    """Invalid function-space request or mismatched space/mesh pairing."""


class KernelError(HbemError):
    """Invalid operator description (unknown kernel, bad wavenumber)."""


class ContractViolationError(HbemError):
    """A batched-integration request violated the backend contract,
    e.g. it contained a non-disjoint element pair."""


class CapacityError(HbemError):
    """A resource limit would be exceeded.  Raised before any allocation
    is attempted; the message states the requested and permitted sizes."""


class AssemblyError(HbemError):
    """Operator assembly failed.  Wraps lower-level failures with the
    block or element-pair coordinates where they occurred."""


class SolverError(HbemError):
    """Iterative solver broke down or failed to converge."""


class ConfigError(HbemError):
    """Invalid configuration value or malformed configuration file."""
