"""Exact solvers for forward-backward stochastic difference equations on finite trees."""

__version__ = "0.1.0"

from .filtration import (
    AdaptedProcess,
    CheckResult,
    IncrementDistribution,
    MomentReport,
    ProbabilityTree,
    conditional_expectation,
    conditional_increment_covariation,
    expectation,
    is_martingale,
    is_strongly_orthogonal,
    validate_increments,
)
from .bsde import (
    BsdeResidualReport,
    BsdeSolution,
    Generator,
    bsde_residuals,
    solution_energy,
    solve_bsde,
)
from .model_dsl import (
    ExprEvalError,
    ExprSyntaxError,
    eval_expr,
    format_expr,
    free_variables,
    parse_expr,
)
from .linear_fbsde import (
    FbsdeSolution,
    GammaReport,
    LinearCoefficients,
    LinearResidualReport,
    NotSolvableError,
    RiccatiMatrices,
    RiccatiSequence,
    SolvabilityReport,
    anchor_coefficients,
    check_solvability,
    linear_residual,
    riccati_backward,
    riccati_matrices,
    solve_linear,
)
from .nonlinear_fbsde import (
    ContinuationConfig,
    ContinuationFailedError,
    ContinuationResult,
    ContinuationTrace,
    DualityReport,
    MonotonicityReport,
    NonlinearModel,
    NonlinearResidualReport,
    ProcessTriple,
    StageRecord,
    check_monotone,
    duality_gap,
    homotopy_coefficients,
    nonlinear_residual,
    reconstruct_compensator,
    solve_continuation,
    weighted_distance,
)
from .oracle import (
    NewtonTrace,
    OracleFailedError,
    OracleSolution,
    ResidualSystem,
    build_residual_system,
    solution_gap,
    solve_global_newton,
)

__all__ = [
    "AdaptedProcess",
    "BsdeResidualReport",
    "BsdeSolution",
    "CheckResult",
    "ContinuationConfig",
    "ContinuationFailedError",
    "ContinuationResult",
    "ContinuationTrace",
    "DualityReport",
    "ExprEvalError",
    "ExprSyntaxError",
    "FbsdeSolution",
    "GammaReport",
    "Generator",
    "IncrementDistribution",
    "LinearCoefficients",
    "LinearResidualReport",
    "MomentReport",
    "MonotonicityReport",
    "NewtonTrace",
    "NonlinearModel",
    "NonlinearResidualReport",
    "NotSolvableError",
    "OracleFailedError",
    "OracleSolution",
    "ProbabilityTree",
    "ProcessTriple",
    "ResidualSystem",
    "RiccatiMatrices",
    "RiccatiSequence",
    "SolvabilityReport",
    "StageRecord",
    "anchor_coefficients",
    "bsde_residuals",
    "build_residual_system",
    "check_monotone",
    "check_solvability",
    "conditional_expectation",
    "conditional_increment_covariation",
    "duality_gap",
    "eval_expr",
    "expectation",
    "format_expr",
    "free_variables",
    "homotopy_coefficients",
    "is_martingale",
    "is_strongly_orthogonal",
    "linear_residual",
    "nonlinear_residual",
    "parse_expr",
    "reconstruct_compensator",
    "riccati_backward",
    "riccati_matrices",
    "solution_energy",
    "solution_gap",
    "solve_bsde",
    "solve_continuation",
    "solve_global_newton",
    "solve_linear",
    "validate_increments",
]
