"""Gaussian-process detection of gradual and sudden effects of unrecorded variables."""

from .effects import (
    ChangePoint,
    EffectCurves,
    dominant_change_points,
    effect_curves,
    gradual_effect,
    marginal_prediction,
    prediction_curve,
    sudden_series,
)
from .estimator import Dataset, FitConfig, FitResult, Hyperparameters, fit, profile_objective, tau2_update
from .gp import GPFactorization, GPPredictor, SingularMatrixError, factorize, make_predictor
from .kernel import KernelSpec, corr, corr_matrix, cross_corr, dx_weights, norm_cdf
from .simgen import (
    DegradationSpec,
    GroundTruth,
    ToySpec,
    benchmark,
    degradation_factor,
    gen_degradation_study,
    gen_toy,
    xiong_f,
)
from .sparse import (
    ChangeCoefficients,
    FoldAssignment,
    LassoConvergenceError,
    apply_U,
    lambda_max,
    lasso_solve,
    make_folds,
    select_lambda_cv,
    select_lambda_cv_kriging,
)

__version__ = "0.1.0"
