"""Identification of a time-dependent reaction coefficient in a 2D parabolic equation."""

__version__ = "0.1.0"

from .direct import CoefficientFunction, FieldTrajectory, TimeGrid, run_direct  # noqa: E402
from .fem import PointEval, ProblemSpec, WeightedIntegral, assemble, build_observation  # noqa: E402
from .inverse import SchemeKind, identify, solve_nonlinear_implicit, solve_via_transform  # noqa: E402
from .mesh import Mesh, PolygonSpec, trapezoid, triangulate, validate  # noqa: E402

__all__ = [
    "CoefficientFunction",
    "FieldTrajectory",
    "Mesh",
    "PointEval",
    "PolygonSpec",
    "ProblemSpec",
    "SchemeKind",
    "TimeGrid",
    "WeightedIntegral",
    "assemble",
    "build_observation",
    "identify",
    "trapezoid",
    "run_direct",
    "solve_nonlinear_implicit",
    "solve_via_transform",
    "triangulate",
    "validate",
]
