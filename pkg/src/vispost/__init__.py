"""Statistical post-processing of ensemble visibility forecasts.

Proportional-odds logistic regression and a multilayer perceptron turn raw
ensemble output into calibrated distributions over the 84 reportable WMO
visibility values; rolling-window training, probabilistic verification and a
synthetic benchmark come with it.
"""

from .data import (
    ForecastCase,
    ForecastRecord,
    ObservationRecord,
    PredictionTable,
    SimConfig,
    StationMeta,
    join_cases,
    load_forecasts,
    load_observations,
    load_predictions,
    load_stations,
    simulate_dataset,
)
from .features import FeatureConfig, extract_features, feature_matrix
from .mlp import MlpArchitecture, MlpParams, MlpTrainConfig, mlp_forward, mlp_loss_grad, train_mlp
from .polr import PolrFitConfig, PolrParams, fit_polr, polr_cdf, polr_nll_grad, polr_pmf
from .scale import N_CLASSES, class_of, round_down, scale_values, value_of
from .training import ExperimentConfig, SpatialScheme, run_experiment
from .verification import crps, logs, pit_value, stationary_bootstrap_ci

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FeatureConfig",
    "ForecastCase",
    "ForecastRecord",
    "MlpArchitecture",
    "MlpParams",
    "MlpTrainConfig",
    "N_CLASSES",
    "ObservationRecord",
    "PolrFitConfig",
    "PolrParams",
    "PredictionTable",
    "SimConfig",
    "SpatialScheme",
    "StationMeta",
    "class_of",
    "crps",
    "extract_features",
    "feature_matrix",
    "fit_polr",
    "join_cases",
    "load_forecasts",
    "load_observations",
    "load_predictions",
    "load_stations",
    "logs",
    "mlp_forward",
    "mlp_loss_grad",
    "pit_value",
    "polr_cdf",
    "polr_nll_grad",
    "polr_pmf",
    "round_down",
    "run_experiment",
    "scale_values",
    "simulate_dataset",
    "stationary_bootstrap_ci",
    "train_mlp",
    "value_of",
]
