"""Calibrated counterfactual predictions for variance-reduced estimation in randomized trials."""

from .calibration import CalibrationWeights, weight_ate, weight_robust, weight_smooth
from .data import (
    CsvSchema,
    FoldAssignment,
    PropensitySpec,
    RctDataset,
    dump_dataset,
    lambda_t,
    load_dataset,
    load_propensity,
    split_folds,
)
from .efftest import EffTestReport, kernel_gamma, sup_test
from .errors import (
    CalmError,
    DomainError,
    HarnessError,
    MissingPredictionError,
    OutOfSupportError,
    ParseError,
    RemoteError,
    UnstableQueryError,
)
from .estimators import (
    EstimateReport,
    OracleNuisance,
    TheoreticalVariance,
    estimate_ate_aipw,
    estimate_ate_calm,
    estimate_ate_calm_fs,
    estimate_cate_calm,
    estimate_mu_aipw,
    estimate_mu_calm,
    estimate_mu_calm_fs,
    influence_aipw,
    influence_zero_shot,
    theoretical_variance,
)
from .nuisance import NuisanceBundle, RegressorConfig, cross_fit, fit_conditional_mean, fit_conditional_second_moments
from .predictor import (
    FilePredictor,
    PredictionSet,
    RemotePredictor,
    SyntheticPredictor,
    SyntheticPredictorConfig,
    aggregate_few_shot,
    read_predictions,
    write_predictions,
)
from .simharness import DgpConfig, EstimatorSpec, McMetrics, generate_trial, run_monte_carlo, variance_reduction_report

__version__ = "0.1.0"
