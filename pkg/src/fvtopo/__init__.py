"""Discrete topology optimization with finite-variation sensitivity analysis.

Binary-density compliance minimization on structured quad meshes: Q4
plane-stress finite elements, an evolutionary add/remove optimizer driven
by per-element switch sensitivities, and five interchangeable sensitivity
analyses (naive, foci, hoci, woodbury, cgm) with error-bound diagnostics.
"""

from fvtopo.mesh import (
    Material,
    Mesh,
    FemProblem,
    element_stiffness_q4,
    element_sqrt,
    assemble_global,
    compliance,
    volume,
)
from fvtopo.linalg import (
    Factorization,
    factorize_spd,
    jacobi_preconditioner,
    pcg,
    NotSpdError,
    SingularMatrixError,
    PcgBreakdownError,
)
from fvtopo.selective import SelectiveInverse, selective_inverse_full, selective_inverse_update
from fvtopo.sensitivity import (
    Status,
    SensitivityVector,
    ElementOperator,
    CgmCase,
    sensitivity_naive,
    sensitivity_foci,
    sensitivity_hoci,
    sensitivity_woodbury,
    sensitivity_cgm,
    cgm_closed_form,
    element_operator,
    complement_operator,
    error_bounds,
    norm_map,
)
from fvtopo.optimize import (
    MoveConstraints,
    SensitivityMethod,
    OptimizerConfig,
    OptimizerState,
    schedule,
    solve_subproblem,
    conic_filter,
    momentum_blend,
    optimize,
)

__version__ = "0.1.0"
