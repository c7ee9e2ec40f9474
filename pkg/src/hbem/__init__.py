"""Galerkin boundary elements for the 3D Laplace and Helmholtz equations.

Four boundary operators (single layer, double layer, its adjoint, and the
hypersingular operator) are assembled either densely or as ACA-compressed
hierarchical matrices, with bulk regular integrals routed through batched
integration backends.  The scatter module solves sound-hard acoustic
scattering with a Burton-Miller combined-field formulation.  Functionality
lives in the submodules (hbem.mesh, hbem.kernels, hbem.assembly, ...); this
namespace is kept empty on purpose.
"""

__version__ = "0.1.0"
