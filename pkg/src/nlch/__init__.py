"""Finite-element simulator for a non-local Cahn-Hilliard equation with
degenerate mobility and a singular single-well potential."""

from .kernel import KernelMatrices, KernelSpec, assemble_kernel_matrices, conv_lumped, kernel_eval
from .mesh import Domain2D, Mesh, assemble_stiffness, build_uniform_mesh, lumped_inner_product
from .potential import (
    MobilityParams,
    PotentialParams,
    convexity_margin,
    mobility,
    psi1,
    psi1_lambda,
    psi1_prime,
    psi1_second,
    psi2,
    psi2_prime,
    separation_threshold,
)
from .sim import Diagnostics, SimConfig, SimulationError, compute_cfl_dt, init_field, lyapunov, run
from .solver import (
    NodePartition,
    SolverError,
    StepOperators,
    StepResult,
    apply_Q,
    build_step_operators,
    classify_nodes,
    dense_oracle_solve,
    discrete_green_apply,
    recover_mu,
    solve_regularized_step,
    solve_vi_step,
)

__all__ = [
    "Domain2D", "Mesh", "build_uniform_mesh", "lumped_inner_product",
    "assemble_stiffness",
    "PotentialParams", "MobilityParams", "psi1", "psi1_prime", "psi1_second",
    "psi2", "psi2_prime", "psi1_lambda", "mobility", "convexity_margin",
    "separation_threshold",
    "KernelSpec", "KernelMatrices", "kernel_eval", "assemble_kernel_matrices",
    "conv_lumped",
    "NodePartition", "StepOperators", "StepResult", "SolverError",
    "classify_nodes", "build_step_operators", "apply_Q", "solve_vi_step",
    "solve_regularized_step", "recover_mu", "dense_oracle_solve",
    "discrete_green_apply",
    "SimConfig", "Diagnostics", "SimulationError", "init_field",
    "compute_cfl_dt", "lyapunov", "run",
]

__version__ = "0.1.0"
