"""Adaptive QM/MM coupling for point defects in 2D lattices."""

__version__ = "0.1.0"

from .errors import (
    CacheError,
    ConfigurationError,
    DimensionError,
    GeometryError,
    InvalidSpecError,
    NumericalError,
    OptimizationError,
    QmmmAdaptError,
    UnsupportedOrderError,
)
from .lattice import (
    DefectiveLattice,
    Displacement,
    LatticeSpec,
    SeminormParams,
    build_lattice,
    du_gamma,
    neighbors,
    seminorm,
    triangular_cell,
)

__all__ = [
    "CacheError",
    "ConfigurationError",
    "DimensionError",
    "GeometryError",
    "InvalidSpecError",
    "NumericalError",
    "OptimizationError",
    "QmmmAdaptError",
    "UnsupportedOrderError",
    "DefectiveLattice",
    "Displacement",
    "LatticeSpec",
    "SeminormParams",
    "build_lattice",
    "du_gamma",
    "neighbors",
    "seminorm",
    "triangular_cell",
    "__version__",
]
