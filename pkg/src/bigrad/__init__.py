"""Bilevel optimization programs as differentiable layers.

Forward solvers for continuous and combinatorial bilevel problems paired
with backward-pass gradient estimators: the adjoint method through the
implicit residual system for smooth problems, and black-box /
straight-through / Monte-Carlo smoothing estimators for discrete ones.
"""

from .continuous import (
    BilevelConfig,
    BilevelSolution,
    ResidualPair,
    SaddleResiduals,
    SmoothObjective,
    barrier_transform,
    build_residuals,
    eq_reparam,
    hypergradient,
    quadratic_objective,
    solve_bilevel,
)
from .discrete import (
    DiscreteBilevel,
    GradientEstimate,
    Lmo,
    bb_grad_merged,
    bb_grad_separate,
    compose_total_grad,
    hamming_loss,
    perturb_jacobian,
    pt_grad,
    sq_l2_loss,
    vertex_lmo,
)
from .interdiction import (
    GridInstance,
    MoveSet,
    RobustSolution,
    TspInstance,
    brute_force_minmax,
    grid_sp_dp,
    held_karp,
    minmax_solve_grid,
    minmax_solve_tsp,
    robust_master,
    topb_game,
    worst_interdiction,
)
from .linops import (
    LinearOperator,
    cg_solve,
    dense_solve,
    fd_directional,
    gmres_solve,
    matrix,
    vector,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
