"""Conjugate Bayesian geostatistics with stacking over Matérn hyper-parameters."""

from .conjugate import (
    ConjugateFit,
    PriorSpec,
    SpatialDataset,
    fit,
    lppd,
    lppd_monte_carlo,
    predict,
    sample_posterior,
)
from .kernel import MaternParams, build_corr_matrix, matern_corr
from .predict import StackedModel, evaluate, fit_candidates, stack
from .special import bessel_k
from .stacking import (
    DEFAULT_GRID,
    CandidateGrid,
    assign_folds,
    build_cv_table,
    solve_weights_densities,
    solve_weights_means,
)

__version__ = "0.1.0"
