"""Point and interval forecast scores."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, ParameterError


def _flat(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    n = out[0].size
    if n == 0:
        raise ContractError("metric needs at least one sample")
    if any(a.size != n for a in out):
        raise ContractError(f"length mismatch: {[a.size for a in out]}")
    return out


def _check_ordered(lower, upper):
    if np.any(upper < lower):
        raise ContractError("interval upper bound below lower bound")


def mae(y, y_hat) -> float:
    y, y_hat = _flat(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    y, y_hat = _flat(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mpiw(lower, upper) -> float:
    lower, upper = _flat(lower, upper)
    _check_ordered(lower, upper)
    return float(np.mean(upper - lower))


def interval_score(lower, upper, y, alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    lower, upper, y = _flat(lower, upper, y)
    _check_ordered(lower, upper)
    below = (lower - y) * (y < lower)
    above = (y - upper) * (y > upper)
    return float(np.mean((upper - lower) + (2.0 / alpha) * below + (2.0 / alpha) * above))


def coverage(lower, upper, y) -> float:
    """Percentage of truths strictly inside their interval; boundary hits count as misses."""
    lower, upper, y = _flat(lower, upper, y)
    return float(100.0 * np.mean((lower < y) & (y < upper)))


def selective_regression_curve(point, uncertainty, y, grid) -> list[tuple[float, float]]:
    """MAE over the most certain fraction of samples, for each kept fraction in ``grid``."""
    point, uncertainty, y = _flat(point, uncertainty, y)
    order = np.lexsort((np.arange(point.size), uncertainty))
    errors = np.abs(y - point)[order]
    curve = []
    for f in grid:
        if not 0.0 < f <= 1.0:
            raise ParameterError(f"kept fraction {f} outside (0, 1]")
        k = max(1, int(round(f * point.size)))
        curve.append((float(f), float(errors[:k].mean())))
    return curve


def reliability_curve(intervals_by_level: dict[float, tuple[np.ndarray, np.ndarray]], y) -> list[tuple[float, float]]:
    """(nominal, empirical) coverage pairs, both as fractions in [0, 1]."""
    out = []
    for nominal in sorted(intervals_by_level):
        lo, hi = intervals_by_level[nominal]
        out.append((float(nominal), coverage(lo, hi, y) / 100.0))
    return out


METRIC_NAMES = ("mae", "rmse", "mpiw", "interval_score", "coverage")


def score_block(y, lower, upper, point, alpha: float) -> dict[str, float]:
    return {
        "mae": mae(y, point),
        "rmse": rmse(y, point),
        "mpiw": mpiw(lower, upper),
        "interval_score": interval_score(lower, upper, y, alpha),
        "coverage": coverage(lower, upper, y),
    }


@dataclass
class EvalReport:
    """Headline scores plus per-category and per-horizon breakdowns."""

    alpha: float
    split: str
    mae: float
    rmse: float
    mpiw: float | None
    interval_score: float | None
    coverage: float | None
    coverage_pass: bool | None
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)
    per_horizon: dict[str, dict[str, float]] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list[dict]:
        rows = [{"split": self.split, "category": "all", "horizon": "all",
                 **{k: getattr(self, k) for k in METRIC_NAMES}}]
        for cat, scores in self.per_category.items():
            rows.append({"split": self.split, "category": cat, "horizon": "all", **scores})
        for h, scores in self.per_horizon.items():
            rows.append({"split": self.split, "category": "all", "horizon": h, **scores})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["split", "category", "horizon", *METRIC_NAMES],
                                lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in self.csv_rows():
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()


def evaluate(y, lower, upper, alpha: float, split: str = "test", point=None,
             categories: list[str] | None = None, with_intervals: bool = True) -> EvalReport:
    """Score arrays shaped (samples, N, T_out, C).

    ``point`` defaults to the interval midpoint.
    """
    y = np.asarray(y, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if point is None:
        point = 0.5 * (lower + upper)
    n_cat = y.shape[-1]
    categories = categories or [f"c{i}" for i in range(n_cat)]
    head = score_block(y, lower, upper, point, alpha)
    per_cat = {categories[c]: score_block(y[..., c], lower[..., c], upper[..., c], point[..., c], alpha)
               for c in range(n_cat)}
    per_h = {str(h + 1): score_block(y[..., h, :], lower[..., h, :], upper[..., h, :], point[..., h, :], alpha)
             for h in range(y.shape[-2])}
    if not with_intervals:
        for block in [head, *per_cat.values(), *per_h.values()]:
            for k in ("interval_score", "coverage"):
                block[k] = None
    cov = head["coverage"]
    return EvalReport(
        alpha=alpha, split=split, mae=head["mae"], rmse=head["rmse"], mpiw=head["mpiw"],
        interval_score=head["interval_score"], coverage=cov,
        coverage_pass=None if cov is None else cov >= 100.0 * (1.0 - alpha) - 1e-9,
        per_category=per_cat, per_horizon=per_h,
    )
