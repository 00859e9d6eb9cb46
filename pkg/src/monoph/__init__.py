"""Primal-dual gradient flows for optimal control and their interconnection
with monotone port-Hamiltonian plants.

The package builds an implicit-Euler discretization of a linear-quadratic
optimal control problem, assembles its KKT operator as a monotone map, and
integrates the resulting saddle-point flows either on their own (open
loop) or coupled to a plant (closed loop).  Every structural property the
flows rely on is available as a sampled runtime check.
"""

from .discrete_ops import LinearOp, SystemMatrices, build_C, build_C_star, build_skew_coupling
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    MonoPHError,
    ShapeError,
    SolverError,
    UnsupportedError,
    UsageError,
)
from .flows import Flow, FlowState, PlantSpec, Variant, conserving_plant, feedback_u_p, linear_plant, make_flow, plant_rhs
from .integrator import IntegratorConfig, Trajectory, estimate_decay_rate, integrate, spectral_step_bound
from .monotone import BoxSet, MonotoneMap, build_prox_coupling, moreau_complement, project_box, resolvent_step
from .ocp import CostSpec, KktPoint, OcpSpec, assemble_M_opt, grad_J, kkt_residual, solve_kkt
from .timegrid import GridFunction, Layout, TimeGrid, inner_product, norm, stack_inner

__version__ = "0.1.0"

__all__ = [
    "BoxSet", "ConfigError", "ConvergenceError", "CostSpec", "DivergenceError", "Flow", "FlowState",
    "GridFunction", "IntegratorConfig", "KktPoint", "Layout", "LinearOp", "MonoPHError", "MonotoneMap",
    "OcpSpec", "PlantSpec", "ShapeError", "SolverError", "SystemMatrices", "TimeGrid", "Trajectory",
    "UnsupportedError", "UsageError", "Variant", "assemble_M_opt", "build_C", "build_C_star",
    "build_prox_coupling", "build_skew_coupling", "conserving_plant", "estimate_decay_rate",
    "feedback_u_p", "grad_J", "inner_product", "integrate", "kkt_residual", "linear_plant", "make_flow",
    "moreau_complement", "norm", "plant_rhs", "project_box", "resolvent_step", "solve_kkt",
    "spectral_step_bound", "stack_inner",
]
