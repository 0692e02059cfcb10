"""Nonconvex low-rank tensor completion with structure-aware proximal averaging."""

from .datagen import (
    Split,
    SyntheticProblem,
    add_outliers,
    affinity_from_distance,
    haversine,
    laplacian_from_affinity,
    mrr_hits,
    default_nobs,
    rank_measure,
    rmse,
    spikiness,
    split,
    synth_lowrank,
    synth_smooth_mode1,
)
from .io import ParseError, coo_read, coo_write, factors_load, factors_save, matrix_read, matrix_write
from .losses import Logistic, RobustSmoothed, Square, lipschitz_rho, loss_deriv, loss_value, sparse_gradient
from .penalties import (
    CappedL1,
    Lsp,
    Mcp,
    NuclearNorm,
    PenaltySpec,
    Scad,
    Tnn,
    gsvt,
    kappa,
    kappa0,
    penalty_from_name,
    scalar_prox,
)
from .solver import (
    SolveResult,
    SolverConfig,
    SolverState,
    extrapolation_singvals,
    nort_solve,
    nort_step,
    objective,
    random_init,
    smoothing_nort,
)
from .splr import (
    PartialSvd,
    SplrOperator,
    kron_unfold_left,
    kron_unfold_right,
    lanczos_svd,
    power_svd,
    sparse_unfold_left,
    sparse_unfold_right,
)
from .tensor import (
    FactoredTensor,
    FactorPair,
    SparseTensorCoo,
    dense_fold,
    dense_unfold,
    factored_element,
    factored_values,
    fold_index,
    unfold_index,
)

__version__ = "0.1.0"
