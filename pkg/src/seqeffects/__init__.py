"""Compositional effect models for sequences of categorical interventions."""

__version__ = "0.1.0"

from .baseline import BaselineConfig, BaselineFit, BaselineParams, baseline_fit, baseline_predict
from .basis import BasisParams, basis_eval, basis_eval_series, basis_init_random
from .conformal import (
    ConformalCalibration,
    Interval,
    conformal_interval,
    coverage_eval,
    gap_bound,
    plugin_interval,
    residual_scores,
    split_quantile,
    weighted_quantile,
)
from .data import Dataset, DatasetError, SplitSpec, UnitRecord, load_dataset, save_dataset, split
from .effects import (
    BoundedEffect,
    EffectParams,
    UnboundedEffect,
    psi_aggregate,
    psi_series,
    psi_single,
    warp_trajectory,
)
from .identify import (
    AssumptionError,
    AssumptionReport,
    IdentificationError,
    IdentifyResult,
    check_assumptions,
    identify_all,
    identify_beta,
    identify_psi_lags,
    invert_unbounded,
)
from .model import (
    DesignRow,
    NoiseScales,
    NumericalError,
    PosteriorState,
    Prediction,
    beta_posterior,
    build_design,
    conditional_mean,
    log_evidence,
    log_evidence_dense,
    predict_mc,
    rmse_by_horizon,
)
from .sim import GroundTruth, SimConfig, generate_dataset, sample_effect_params, sample_schedule
from .train import (
    FitResult,
    ModelState,
    TrainConfig,
    TrainingDivergence,
    fit,
    grad_check,
    gradient,
    objective,
)
