"""End-to-end steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import DatasetBundle, WindowSet, build_windows, inverse_transform
from .errors import ConfigError
from .metrics import EvalReport, coverage, evaluate, mae, reliability_curve, selective_regression_curve
from .model import VisitForecaster, mc_dropout_windows, predict_log
from .training import TrainResult, build_model, train
from .uncertainty import CalibrationRecord, apply_calibration, fit_calibration, gaussian_interval

log = logging.getLogger(__name__)

RELIABILITY_LEVELS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
SELECTIVE_GRID = tuple(np.round(np.arange(0.1, 1.01, 0.1), 2))


@dataclass
class Forecast:
    """Original-scale forecasts for a set of windows, each array (W, N, T_out, C)."""

    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    targets: np.ndarray
    mu_log: np.ndarray
    var_log: np.ndarray
    aleatoric: np.ndarray | None = None
    epistemic: np.ndarray | None = None
    calibrated: bool = False

    def calibrate(self, record: CalibrationRecord) -> "Forecast":
        lower, upper = apply_calibration(self.lower, self.upper, record.margin_c)
        return Forecast(lower, self.median, upper, self.mu, self.sigma2, self.targets, self.mu_log,
                        self.var_log, self.aleatoric, self.epistemic, calibrated=True)

    @property
    def point(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


def lognormal_moments(mu_log: np.ndarray, var_log: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Count-scale location and variance for a Gaussian on log1p counts."""
    mu = np.maximum(np.expm1(mu_log), 0.0)
    sigma2 = np.expm1(var_log) * np.exp(2.0 * mu_log + var_log)
    return mu, sigma2


def split_indices(bundle: DatasetBundle, split: str) -> np.ndarray:
    start, stop = bundle.splits[split]
    if stop <= start:
        raise ConfigError(f"the {split} split is empty", f"data.ratios")
    return np.arange(start, stop)


def windows_for(bundle: DatasetBundle, cfg: RunConfig) -> WindowSet:
    return build_windows(bundle, cfg.model.t_in, cfg.model.t_out, cfg.model.pad_to)


def mc_active(model: VisitForecaster, cfg: RunConfig) -> bool:
    return model.variant.mc_enabled and cfg.uq.mc_passes >= 2


def forecast(model: VisitForecaster, cfg: RunConfig, bundle: DatasetBundle, windows: WindowSet, indices,
             alpha: float | None = None, workers: int = 1) -> Forecast:
    """Uncalibrated original-scale forecasts; the interval source follows the variant."""
    alpha = cfg.uq.alpha if alpha is None else alpha
    indices = np.asarray(indices)
    out = predict_log(model, bundle, windows, indices, batch_size=cfg.train.batch_size)
    alea = epi = None
    if mc_active(model, cfg):
        dec = mc_dropout_windows(model, bundle, windows, indices, cfg.uq.mc_passes, cfg.train_seed,
                                 workers, cfg.train.batch_size)
        mu_log, var_log = dec.mean, dec.total
        alea, epi = dec.aleatoric, dec.epistemic
    else:
        mu_log, var_log = out["mu"], out["sigma2"]
    if model.variant.interval_source == "gaussian":
        lo_log, hi_log = gaussian_interval(mu_log, var_log, alpha)
        med_log = np.maximum(mu_log, 0.0)
    else:
        lo_log, med_log, hi_log = out["lower"], out["median"], out["upper"]
    lower, median, upper = (np.maximum(inverse_transform(a), 0.0) for a in (lo_log, med_log, hi_log))
    mu, sigma2 = lognormal_moments(mu_log, var_log)
    if alea is not None:
        # split the count-scale variance in proportion to the log-scale components
        share = np.divide(alea, var_log, out=np.zeros_like(alea), where=var_log > 0)
        alea, epi = sigma2 * share, sigma2 * (1.0 - share)
    targets = windows.targets[indices].astype(np.float64)
    return Forecast(lower, median, upper, mu, sigma2, targets, mu_log, var_log, alea, epi)


def calibrate(model: VisitForecaster, cfg: RunConfig, bundle: DatasetBundle, windows: WindowSet | None = None,
              alpha: float | None = None, workers: int = 1) -> CalibrationRecord:
    alpha = cfg.uq.alpha if alpha is None else alpha
    windows = windows if windows is not None else windows_for(bundle, cfg)
    fc = forecast(model, cfg, bundle, windows, split_indices(bundle, "cal"), alpha, workers)
    return fit_calibration(fc.lower, fc.upper, fc.targets, alpha)


@dataclass
class Evaluation:
    report: EvalReport
    forecast: Forecast
    selective: list[tuple[float, float]]
    reliability: list[tuple[str, float, float]]

    def selective_csv(self) -> str:
        return _csv(["kept_fraction", "mae"], self.selective)

    def reliability_csv(self) -> str:
        return _csv(["source", "nominal", "empirical"], self.reliability)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def evaluate_model(model: VisitForecaster, cfg: RunConfig, bundle: DatasetBundle,
                   record: CalibrationRecord | None, split: str = "test", windows: WindowSet | None = None,
                   alpha: float | None = None, workers: int = 1) -> Evaluation:
    alpha = record.alpha if record is not None else (cfg.uq.alpha if alpha is None else alpha)
    windows = windows if windows is not None else windows_for(bundle, cfg)
    raw = forecast(model, cfg, bundle, windows, split_indices(bundle, split), alpha, workers)
    use_cal = record is not None and model.variant.calibrate
    fc = raw.calibrate(record) if use_cal else raw
    if record is None and model.variant.calibrate:
        log.warning("no calibration record supplied; reporting uncalibrated intervals")
    report = evaluate(fc.targets, fc.lower, fc.upper, alpha, split, categories=bundle.config.category_names(),
                      with_intervals=model.variant.gaussian_reported)
    report.extras.update({
        "variant": model.variant.name,
        "calibrated": bool(use_cal),
        "uncalibrated_coverage": coverage(raw.lower, raw.upper, raw.targets),
        "median_mae": mae(fc.targets, fc.median),
        "n_points": int(fc.targets.size),
    })
    if not model.variant.gaussian_reported:
        report.extras["absent"] = ["interval_score", "coverage"]
    if record is not None:
        report.extras["margin_c"] = record.margin_c
    selective = selective_regression_curve(fc.point, fc.upper - fc.lower, fc.targets, SELECTIVE_GRID)
    intervals = {}
    for level in RELIABILITY_LEVELS:
        lo_log, hi_log = gaussian_interval(fc.mu_log, fc.var_log, 1.0 - level)
        intervals[level] = (inverse_transform(lo_log), inverse_transform(hi_log))
    reliability = [("gaussian", lvl, emp) for lvl, emp in reliability_curve(intervals, fc.targets)]
    source = "quantile_calibrated" if use_cal else "quantile"
    for lvl, emp in reliability_curve({1.0 - alpha: (fc.lower, fc.upper)}, fc.targets):
        reliability.append((source, lvl, emp))
    return Evaluation(report, fc, selective, reliability)


def predictions_csv(bundle: DatasetBundle, fc: Forecast, window: int, start: int) -> str:
    """One row per (node, horizon step, category) for a single forecast window."""
    cats = bundle.config.category_names()
    header = ["node", "step", "horizon", "category", "lower", "median", "upper", "mu", "sigma2"]
    with_mc = fc.aleatoric is not None
    if with_mc:
        header += ["aleatoric", "epistemic"]
    rows = []
    _, n, t_out, n_cat = fc.lower.shape
    for node in range(n):
        for h in range(t_out):
            for c in range(n_cat):
                idx = (window, node, h, c)
                row = [node, start + h, h + 1, cats[c]] + [repr(float(getattr(fc, k)[idx])) for k in
                                                          ("lower", "median", "upper", "mu", "sigma2")]
                if with_mc:
                    row += [repr(float(fc.aleatoric[idx])), repr(float(fc.epistemic[idx]))]
                rows.append(row)
    return _csv(header, rows)


def train_model(cfg: RunConfig, bundle: DatasetBundle, windows: WindowSet | None = None,
                **kwargs) -> tuple[VisitForecaster, TrainResult]:
    windows = windows if windows is not None else windows_for(bundle, cfg)
    model = build_model(cfg, bundle.n_categories, bundle.demographics.shape[1], bundle.externals.shape[2])
    result = train(model, bundle, windows, cfg, **kwargs)
    return model, result


def ablation_run(variant: str, bundle: DatasetBundle, cfg: RunConfig, workers: int = 1) -> EvalReport:
    """Train, calibrate (when the variant allows) and score one ablation variant on the test split."""
    cfg = cfg.model_copy(update={"variant": variant})
    cfg = RunConfig.model_validate(cfg.model_dump())
    windows = windows_for(bundle, cfg)
    model, _ = train_model(cfg, bundle, windows)
    record = calibrate(model, cfg, bundle, windows, workers=workers) if model.variant.calibrate else None
    return evaluate_model(model, cfg, bundle, record, "test", windows, workers=workers).report
