"""granst: two-phase dense granular flow with space-time finite elements.

Simulates the collapse and spreading of dense granular media as an
incompressible two-phase flow. The granular phase uses the regularized
mu(I)-rheology, the interface is captured with a level-set field, and the
discretization is a stabilized P1P1 space-time finite element method on
either flat (prismatic) or simplex space-time meshes, the latter with
temporal refinement near the interface.
"""

__version__ = "0.1.0"

from .rheology import RheologyParams, viscosity, viscosity_gp
from .errors import GranstError, ConfigurationError, MeshError, ConvergenceError

__all__ = [
    "__version__",
    "RheologyParams",
    "viscosity",
    "viscosity_gp",
    "GranstError",
    "ConfigurationError",
    "MeshError",
    "ConvergenceError",
]
