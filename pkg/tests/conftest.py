import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hbem.kernels import OperatorSpec, make_integration_context
from hbem.mesh import refine_unit_sphere
from hbem.spaces import build_space

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

_MESHES: dict = {}
_SPACES: dict = {}
_CONTEXTS: dict = {}


@pytest.fixture(scope="session")
def sphere():
    """Cached icosphere factory: sphere(level) -> TriangleMesh."""
    def get(level: int):
        if level not in _MESHES:
            _MESHES[level] = refine_unit_sphere(level)
        return _MESHES[level]
    return get


@pytest.fixture(scope="session")
def space_of(sphere):
    """Cached space factory: space_of(level, family) -> FunctionSpace."""
    def get(level: int, family: str):
        key = (level, family)
        if key not in _SPACES:
            _SPACES[key] = build_space(sphere(level), family)
        return _SPACES[key]
    return get


@pytest.fixture(scope="session")
def ctx_of(space_of):
    """Cached integration contexts keyed by the full operator setting."""
    def get(level: int, family: str, equation: str, operator: str,
            k: float = 0.0, precision: str = "double",
            regular_order: int = 4, singular_base_order: int = 4):
        key = (level, family, equation, operator, k, precision,
               regular_order, singular_base_order)
        if key not in _CONTEXTS:
            spec = OperatorSpec(equation, operator, wavenumber=k, precision=precision)
            sp = space_of(level, family)
            _CONTEXTS[key] = make_integration_context(
                spec, sp, sp, regular_order, singular_base_order)
        return _CONTEXTS[key]
    return get


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
