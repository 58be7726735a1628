"""Uncertainty heads, their losses, and post-hoc interval calibration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, ParameterError
from .nn import Init, Linear, Module

SIGMA_FLOOR = 1e-4
RESIDUAL_EPS = 1e-6


def quantile_levels(alpha: float) -> tuple[float, float, float]:
    return (alpha / 2.0, 0.5, 1.0 - alpha / 2.0)


# ---------------------------------------------------------------- heads

class QuantileHeads(Module):
    """Median plus softplus gaps, so lower <= median <= upper by construction."""

    def __init__(self, init: Init, d_head: int, n_out: int):
        self.median = Linear(init, d_head, n_out)
        self.gap_lower = Linear(init, d_head, n_out)
        self.gap_upper = Linear(init, d_head, n_out)

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        m = self.median(features)
        lo = ad.sub(m, ad.softplus(self.gap_lower(features)))
        hi = ad.add(m, ad.softplus(self.gap_upper(features)))
        return ad.relu(lo), ad.relu(m), ad.relu(hi)


class GaussianHead(Module):
    def __init__(self, init: Init, d_head: int, n_out: int, sigma_floor: float = SIGMA_FLOOR):
        self.mean = Linear(init, d_head, n_out)
        self.var = Linear(init, d_head, n_out)
        self.sigma_floor = sigma_floor

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        mu = ad.relu(self.mean(features))
        sigma2 = ad.add_scalar(ad.softplus(self.var(features)), self.sigma_floor)
        return mu, sigma2


# ---------------------------------------------------------------- losses

def pinball_loss(predictions: Sequence[Tensor], targets, levels: Sequence[float]) -> Tensor:
    """Mean over levels and samples of max(q z, (q - 1) z), z = y - prediction.

    Written as q relu(z) + (1 - q) relu(-z) so that q = 0.5 gives |z|/2 exactly.
    """
    targets = ad.as_tensor(targets)
    if targets.data.size == 0:
        raise ContractError("pinball loss needs at least one sample")
    if len(predictions) != len(levels):
        raise ContractError(f"{len(predictions)} predictions for {len(levels)} levels")
    terms = []
    for pred, q in zip(predictions, levels):
        if not 0.0 < q < 1.0:
            raise ContractError(f"quantile level {q} outside (0, 1)")
        z = ad.sub(targets, pred)
        terms.append(ad.mean(ad.add(ad.scale(ad.relu(z), q), ad.scale(ad.relu(ad.scale(z, -1.0)), 1.0 - q))))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


def nll_loss(mu, sigma2, targets) -> Tensor:
    """Gaussian negative log-likelihood without the constant term."""
    mu, sigma2, targets = ad.as_tensor(mu), ad.as_tensor(sigma2), ad.as_tensor(targets)
    if np.any(sigma2.data <= 0):
        raise ContractError("variance must be strictly positive")
    resid = ad.sub(targets, mu)
    quad = ad.div(ad.mul(resid, resid), ad.scale(sigma2, 2.0))
    return ad.mean(ad.add(ad.scale(ad.log(sigma2), 0.5), quad))


def param_loss(pass_means: Sequence[Tensor]) -> Tensor:
    """Mean squared spread of per-pass means around their ensemble mean."""
    m = len(pass_means)
    if m < 2:
        raise ContractError("ensemble consistency needs at least 2 passes")
    center = pass_means[0]
    for mu in pass_means[1:]:
        center = ad.add(center, mu)
    center = ad.scale(center, 1.0 / m)
    spread = None
    for mu in pass_means:
        dev = ad.sub(mu, center)
        sq = ad.mul(dev, dev)
        spread = sq if spread is None else ad.add(spread, sq)
    return ad.mean(ad.scale(spread, 1.0 / m))


def calib_loss(mu, sigma, targets, epsilon: float = RESIDUAL_EPS) -> Tensor:
    """(mean r)^2 + (mean r^2 - 1)^2 for standardized residuals r = (y - mu)/(sigma + eps)."""
    mu, sigma, targets = ad.as_tensor(mu), ad.as_tensor(sigma), ad.as_tensor(targets)
    if np.any(sigma.data < 0):
        raise ContractError("sigma must be nonnegative")
    r = ad.div(ad.sub(targets, mu), ad.add_scalar(sigma, epsilon))
    first = ad.mean(r)
    second = ad.add_scalar(ad.mean(ad.mul(r, r)), -1.0)
    return ad.add(ad.mul(first, first), ad.mul(second, second))


LOSS_NAMES = ("quant", "nll", "param", "calib")


def total_loss(components: dict[str, Tensor], weights: dict[str, float] | None = None) -> Tensor:
    """Weighted sum of the loss components; a zero weight drops a component entirely."""
    weights = weights or {}
    total = None
    for name, value in components.items():
        w = weights.get(name, 1.0)
        if w == 0.0:
            continue
        if not np.all(np.isfinite(value.data)):
            raise NumericError(f"loss component {name!r}")
        term = value if w == 1.0 else ad.scale(value, w)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ContractError("every loss component is disabled")
    return total


# ---------------------------------------------------------------- gaussian intervals

# Rational inverse-CDF approximation (Acklam); relative error below 1.2e-9.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise ParameterError(f"probability must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
               ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -norm_ppf(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
           (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def gaussian_interval(mu, sigma2, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Central (1 - alpha) interval mu +/- z sigma, clipped at zero."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    z = norm_ppf(1.0 - alpha / 2.0)
    sigma = np.sqrt(np.asarray(sigma2, dtype=np.float64))
    mu = np.asarray(mu, dtype=np.float64)
    return np.maximum(mu - z * sigma, 0.0), np.maximum(mu + z * sigma, 0.0)


# ---------------------------------------------------------------- MC dropout

@dataclass
class McDecomposition:
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    pass_means: list[np.ndarray]

    @property
    def total(self) -> np.ndarray:
        return self.aleatoric + self.epistemic


def decompose_passes(pass_means: Sequence[np.ndarray], pass_vars: Sequence[np.ndarray]) -> McDecomposition:
    """Reduce per-pass Gaussian outputs in pass order."""
    m = len(pass_means)
    if m < 2 or len(pass_vars) != m:
        raise ParameterError(f"need at least 2 paired passes, got {m} means and {len(pass_vars)} variances")
    # shift by the first pass so identical passes give epistemic exactly 0
    ref = pass_means[0]
    shift = np.zeros_like(ref)
    alea = np.zeros_like(pass_vars[0])
    for mu, var in zip(pass_means, pass_vars):
        shift += mu - ref
        alea += var
    shift /= m
    alea /= m
    mean = ref + shift
    epi = np.zeros_like(mean)
    for mu in pass_means:
        epi += ((mu - ref) - shift) ** 2
    epi /= m
    return McDecomposition(mean, alea, epi, list(pass_means))


# ---------------------------------------------------------------- conformal calibration

SCORE_QUANTILE_LEVELS = (0.5, 0.9, 0.99)


@dataclass
class CalibrationRecord:
    alpha: float
    n_cal: int
    coverage_gap: float
    margin_c: float
    scores: np.ndarray | None = None
    stored_quantiles: list[float] | None = None

    def score_quantiles(self) -> list[float]:
        if self.scores is None:
            return list(self.stored_quantiles or [])
        return [float(v) for v in np.quantile(self.scores, SCORE_QUANTILE_LEVELS)]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_cal": self.n_cal,
            "coverage_gap": self.coverage_gap,
            "margin_c": self.margin_c,
            "score_quantiles": self.score_quantiles(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationRecord":
        doc = json.loads(Path(path).read_text())
        return cls(float(doc["alpha"]), int(doc["n_cal"]), float(doc["coverage_gap"]),
                   float(doc["margin_c"]), None, [float(v) for v in doc.get("score_quantiles", [])])


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)), tolerant of float round-off."""
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9)


def nonconformity_scores(lower, upper, y) -> np.ndarray:
    lower, upper, y = (np.asarray(a, dtype=np.float64).ravel() for a in (lower, upper, y))
    return np.maximum(np.maximum(lower - y, y - upper), 0.0)


def fit_calibration(lower, upper, y, alpha: float) -> CalibrationRecord:
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    scores = nonconformity_scores(lower, upper, y)
    n = scores.size
    if n == 0:
        raise ContractError("calibration set is empty")
    lo, hi, yy = (np.asarray(a, dtype=np.float64).ravel() for a in (lower, upper, y))
    covered = np.mean((lo <= yy) & (yy <= hi))
    rank = conformal_rank(n, alpha)
    ordered = np.sort(scores)
    margin = float(ordered[min(rank, n) - 1])
    return CalibrationRecord(alpha, n, float((1.0 - alpha) - covered), margin, scores)


def apply_calibration(lower, upper, c: float) -> tuple[np.ndarray, np.ndarray]:
    if c < 0:
        raise ContractError(f"margin must be nonnegative, got {c}")
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    return np.maximum(lower - c, 0.0), upper + c
