"""Spatiotemporal forecasting of facility visits with calibrated uncertainty."""

from .config import RunConfig, load_config
from .data import DatasetBundle, build_windows, generate_synthetic, load_bundle, save_bundle
from .errors import ConfigError, ContractError, NumericError, ParameterError, ShapeError, StvisitError
from .model import VisitForecaster
from .pipeline import ablation_run, calibrate, evaluate_model, forecast, train_model
from .training import Checkpoint, train

__version__ = "0.1.0"
