"""Synchronization analysis for networks of matching-controlled DC/AC converters."""
from .equilibrium import (
    Equilibrium, NoConvergence, RankDeficiency, check_condition1, feasible_input,
    solve_equilibrium,
)
from .kernels import BACKEND
from .linearization import (
    CertificateRefused, InstabilityDetected, LyapunovCertificate, LyapunovSolveError, jacobian,
    lyapunov_certificate,
)
from .model import (
    ConverterParams, LineParams, Model, ParameterError, SystemState, Topology, TopologyError,
    assemble_model, group_action, load_network, quotient_distance, vector_field,
)
from .simulation import (
    DivergenceError, SweepSpec, Trajectory, estimate_region, integrate, integrate_variational,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CertificateRefused", "ConverterParams", "DivergenceError", "Equilibrium",
    "InstabilityDetected", "LineParams", "LyapunovCertificate", "LyapunovSolveError", "Model",
    "NoConvergence", "ParameterError", "RankDeficiency", "SweepSpec", "SystemState", "Topology",
    "TopologyError", "Trajectory", "assemble_model", "check_condition1", "estimate_region",
    "feasible_input", "group_action", "integrate", "integrate_variational", "jacobian",
    "load_network", "lyapunov_certificate", "quotient_distance", "solve_equilibrium",
    "vector_field",
]
