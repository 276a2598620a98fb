"""Particle simulation of McKean-Vlasov stochastic flows, their Jacobians,
inverse flows and stopping times."""

__version__ = "0.1.0"

from .coefficients import CoefficientSet, build_family
from .errors import (
    CapabilityError,
    ConfigurationError,
    MeasureError,
    NumericalFailure,
    OutOfDomainError,
    ProbeError,
)
from .flow import FlowField, SimulationResult, simulate
from .grid import SpatialGrid
from .inverse import integrate_psi, verify_two_sided
from .measure import EmpiricalMeasure
from .paths import BrownianPaths, TimeGrid, refine_halve, sample_paths

__all__ = [
    "BrownianPaths",
    "CapabilityError",
    "CoefficientSet",
    "ConfigurationError",
    "EmpiricalMeasure",
    "FlowField",
    "MeasureError",
    "NumericalFailure",
    "OutOfDomainError",
    "ProbeError",
    "SimulationResult",
    "SpatialGrid",
    "TimeGrid",
    "build_family",
    "integrate_psi",
    "refine_halve",
    "sample_paths",
    "simulate",
    "verify_two_sided",
]
