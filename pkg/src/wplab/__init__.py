"""Numerical laboratory for tensor calculus and deformation geometry on
model hyperbolic surfaces: collars, disks, cusps and once-punctured tori.

The package builds desk-scale surfaces with exact or solved hyperbolic
densities, implements the raising/lowering operator calculus on weighted
sections together with its elliptic solvers, solves Beltrami and
prescribed-curvature equations for deformations, and measures the induced
deformation metric, its derivatives and curvature, including scaling studies
along a pinching family.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ConstructionError,
    ConvergenceError,
    DomainError,
    PreconditionError,
    SolverError,
    WplabError,
)

__all__ = [
    "ConfigError",
    "ConstructionError",
    "ConvergenceError",
    "DomainError",
    "PreconditionError",
    "SolverError",
    "WplabError",
    "__version__",
]
