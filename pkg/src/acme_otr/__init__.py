"""Estimation and learning of treatment policies that maximise the average conditional median effect."""

__version__ = "0.1.0"

from .analytic import (
    DiscreteModel,
    Gaussian,
    Mixture,
    ModelError,
    PolicyTable,
    acme_value,
    case_one,
    case_two,
    gaussian_marginal_median,
    marginal_median_value,
    mean_value,
    mme_flip_condition,
    optimal_policies,
    prop1_agreement_check,
    two_group_gaussian_model,
    von_mises_check,
)
from .core import (
    CovariateRule,
    Dataset,
    DimensionError,
    LearnedMeanOptimal,
    LearnedMedianOptimal,
    NuisanceSet,
    Policy,
    RecordedTreatment,
    ThresholdRule,
    TreatAll,
    TreatNone,
    ValueEstimate,
    split_folds,
)
from .estimator import (
    LEARN_MEAN_OPTIMAL,
    LEARN_MEDIAN_OPTIMAL,
    analytic_variance_bound,
    crossfit_nuisances,
    crossfit_value,
    dr_value,
    eif_contributions,
    plugin_value,
)
from .nuisance import ConvergenceError, FitConfig, KernelSpec
from .simulation import LognormalDgp, coverage_experiment, rmse_experiment

__all__ = [name for name in dir() if not name.startswith("_")]
