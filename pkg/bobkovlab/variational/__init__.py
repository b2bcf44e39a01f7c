"""Direct collocation of the variational problem defining the Bellman function."""

from .candidate import analytic_candidate, sample_candidate
from .certify import CertificationReport, certify_value, refinement_error
from .collocation import (
    CollocationGrid,
    ControlTrajectory,
    discretized_constraint,
    discretized_cost,
)
from .minimize import OptimizationResult, constant_initialization, constrained_minimize

__all__ = [
    "CollocationGrid",
    "ControlTrajectory",
    "discretized_cost",
    "discretized_constraint",
    "constrained_minimize",
    "constant_initialization",
    "OptimizationResult",
    "analytic_candidate",
    "sample_candidate",
    "refinement_error",
    "certify_value",
    "CertificationReport",
]
