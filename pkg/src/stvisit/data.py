"""Synthetic multi-category visit data, log transform, windowing and splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SyntheticConfig
from .errors import ConfigError, ContractError
from .graph import GraphSpec, build_gaussian_adjacency, median_distance, pairwise_distances

FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "cal", "test")

# per-category multipliers on the weekly amplitude; nursing facilities are steady
_WEEKLY_SHAPE = (1.0, 0.6, 0.15, 0.8)
# sign of the weather effect per category
_WEATHER_SIGN = (-1.0, 1.0, -0.3, -1.0)
_DRIFT_PHI = 0.97
_WEATHER_PHI = 0.8


@dataclass
class DatasetBundle:
    visits: np.ndarray          # (N, T, C) integer-valued counts
    demographics: np.ndarray    # (N, d_dem)
    externals: np.ndarray       # (N, T, d_ext)
    graph: GraphSpec
    splits: dict[str, tuple[int, int]]
    t_in: int
    t_out: int
    config: SyntheticConfig
    seed: int
    transform: str = "log1p"
    intensity: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.visits.shape[0]

    @property
    def n_steps(self) -> int:
        return self.visits.shape[1]

    @property
    def n_categories(self) -> int:
        return self.visits.shape[2]


# ---------------------------------------------------------------- transforms

def log_transform(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ContractError("log transform needs nonnegative counts")
    return np.log1p(v)


def inverse_transform(v) -> np.ndarray:
    return np.expm1(np.asarray(v, dtype=np.float64))


# ---------------------------------------------------------------- generator

def _spatial_factor(coords: np.ndarray, length: float) -> np.ndarray:
    d = pairwise_distances(coords)
    k = np.exp(-(d * d) / (length * length)) + 1e-6 * np.eye(len(coords))
    return np.linalg.cholesky(k)


def _ar1(rng, chol, n_series: int, n_steps: int, phi: float, sd: float) -> np.ndarray:
    """Spatially correlated AR(1) paths, shape (N, n_steps, n_series), stationary sd ``sd``."""
    n = chol.shape[0]
    out = np.empty((n, n_steps, n_series))
    state = chol @ rng.standard_normal((n, n_series)) * sd
    innov = sd * np.sqrt(1.0 - phi * phi)
    for t in range(n_steps):
        out[:, t] = state
        state = phi * state + innov * (chol @ rng.standard_normal((n, n_series)))
    return out


def _standardize(x: np.ndarray, axis=0) -> np.ndarray:
    sd = x.std(axis=axis, keepdims=True)
    return (x - x.mean(axis=axis, keepdims=True)) / np.where(sd > 0, sd, 1.0)


def shock_multipliers(cfg: SyntheticConfig) -> np.ndarray:
    mult = np.ones((cfg.n_nodes, cfg.n_steps, cfg.n_categories))
    for shock in cfg.shocks:
        nodes = shock.nodes if shock.nodes else list(range(cfg.n_nodes))
        cats = shock.categories if shock.categories else list(range(cfg.n_categories))
        stop = min(shock.start + shock.duration, cfg.n_steps)
        mult[np.ix_(nodes, range(shock.start, stop), cats)] *= shock.multiplier
    return mult


def generate_synthetic(cfg: SyntheticConfig, seed: int | None = None, t_in: int = 7, t_out: int = 3) -> DatasetBundle:
    """Draw a reproducible dataset.

    Counts are rounded log-normal draws around the latent intensity
    base rate x node size x category propensity x seasonality x drift x
    weather x shocks. Setting the seasonality amplitudes, noise, drift and
    external effect to zero with no shocks gives series that are constant at
    the rounded base intensity.
    """
    seed = (cfg.seed if cfg.seed is not None else 0) if seed is None else seed
    if cfg.n_steps < t_in + t_out + 1:
        raise ConfigError("n_steps must exceed t_in + t_out", "data.n_steps")
    rng = np.random.default_rng(seed)
    n, T, C = cfg.n_nodes, cfg.n_steps, cfg.n_categories

    coords = rng.uniform(0.0, cfg.extent, size=(n, 2))
    graph = build_gaussian_adjacency(coords, cfg.graph_sigma, cfg.graph_epsilon)
    chol = _spatial_factor(coords, cfg.spatial_length or median_distance(coords))

    log_size = 0.5 * (chol @ rng.standard_normal(n))
    propensity = 0.3 * (chol @ rng.standard_normal((n, C)))
    base = np.log(np.asarray(cfg.rates()))[None, :] + log_size[:, None] + propensity   # (N, C)

    t = np.arange(T)
    weekly_shape = np.array([_WEEKLY_SHAPE[c % 4] for c in range(C)])
    weekly = np.cos(2 * np.pi * (t % 7) / 7.0)[:, None] * weekly_shape[None, :]        # (T, C)
    monthly = np.zeros((T, C))
    if C >= 4:
        monthly[:, 3] = np.sin(2 * np.pi * t / 30.0)
    seasonal = cfg.weekly_amplitude * weekly + cfg.monthly_amplitude * monthly

    drift = _ar1(rng, chol, C, T, _DRIFT_PHI, cfg.drift_scale)                      # (N, T, C)
    weather = _ar1(rng, chol, 1, T, _WEATHER_PHI, 1.0)[..., 0]                      # (N, T)
    weather_sign = np.array([_WEATHER_SIGN[c % 4] for c in range(C)])
    weather_term = cfg.external_effect * weather[..., None] * weather_sign

    log_intensity = base[:, None, :] + seasonal[None] + drift + weather_term
    intensity = np.exp(log_intensity) * shock_multipliers(cfg)
    noise = rng.standard_normal((n, T, C))
    visits = np.rint(intensity * np.exp(cfg.noise_dispersion * noise))

    demographics = _demographics(rng, chol, cfg.d_dem, log_size, propensity)
    externals = _externals(rng, chol, cfg.d_ext, weather, T)

    windows = n_windows(T, t_in, t_out)
    splits = split_dataset(windows, cfg.ratios, cfg.cal_fraction)
    return DatasetBundle(visits, demographics, externals, graph, splits, t_in, t_out, cfg, seed,
                         intensity=intensity)


def _demographics(rng, chol, d_dem, log_size, propensity) -> np.ndarray:
    n = len(log_size)
    meaningful = np.column_stack([log_size, propensity]) + 0.05 * rng.standard_normal((n, 1 + propensity.shape[1]))
    filler = chol @ rng.standard_normal((n, max(0, d_dem - meaningful.shape[1])))
    return _standardize(np.column_stack([meaningful, filler])[:, :d_dem])


def _externals(rng, chol, d_ext, weather, T) -> np.ndarray:
    n = weather.shape[0]
    t = np.arange(T)
    cols = [weather]
    if d_ext >= 10:
        dow = np.eye(7)[t % 7]
        cols += [np.broadcast_to(dow[:, k], (n, T)) for k in range(7)]
    else:
        cols += [np.broadcast_to(np.sin(2 * np.pi * t / 7.0), (n, T)),
                 np.broadcast_to(np.cos(2 * np.pi * t / 7.0), (n, T))]
    cols += [np.broadcast_to(np.sin(2 * np.pi * t / 30.0), (n, T)),
             np.broadcast_to(np.cos(2 * np.pi * t / 30.0), (n, T))]
    extra = max(0, d_ext - len(cols))
    if extra:
        noise = _ar1(rng, chol, extra, T, 0.5, 1.0)
        cols += [noise[..., k] for k in range(extra)]
    return np.stack(cols[:d_ext], axis=-1).astype(np.float64)


# ---------------------------------------------------------------- windows and splits

def n_windows(n_steps: int, t_in: int, t_out: int) -> int:
    return n_steps - t_in - t_out + 1


@dataclass
class WindowSet:
    """Sliding windows, stride 1, with inputs left-padded to ``pad_to``."""

    visits: np.ndarray       # (W, N, pad_to, C) raw counts
    externals: np.ndarray    # (W, N, pad_to, d_ext)
    targets: np.ndarray      # (W, N, t_out, C) raw counts
    starts: np.ndarray       # (W,) first input step of each window
    t_in: int
    t_out: int

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i):
        return (self.visits[i], self.externals[i]), self.targets[i]

    def target_steps(self, i) -> np.ndarray:
        return self.starts[i] + self.t_in + np.arange(self.t_out)


def build_windows(bundle: DatasetBundle, t_in: int, t_out: int, pad_to: int | None = None) -> WindowSet:
    pad_to = t_in if pad_to is None else pad_to
    if t_in < 1 or t_out < 1:
        raise ContractError("t_in and t_out must be positive")
    if pad_to < t_in:
        raise ContractError(f"pad_to {pad_to} shorter than t_in {t_in}")
    T = bundle.n_steps
    if T < t_in + t_out:
        raise ContractError(f"series of length {T} shorter than t_in + t_out = {t_in + t_out}")
    count = n_windows(T, t_in, t_out)
    starts = np.arange(count)
    in_idx = starts[:, None] + np.arange(t_in)[None, :]
    in_idx = np.concatenate([np.repeat(in_idx[:, :1], pad_to - t_in, axis=1), in_idx], axis=1)
    out_idx = starts[:, None] + t_in + np.arange(t_out)[None, :]
    visits = np.moveaxis(bundle.visits[:, in_idx, :], 0, 1)
    externals = np.moveaxis(bundle.externals[:, in_idx, :], 0, 1)
    targets = np.moveaxis(bundle.visits[:, out_idx, :], 0, 1)
    return WindowSet(visits, externals, targets, starts, t_in, t_out)


def split_dataset(n_windows: int, ratios=(0.8, 0.1, 0.1), cal_fraction: float = 0.5) -> dict[str, tuple[int, int]]:
    """Contiguous chronological [start, stop) blocks; calibration is the tail of validation."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three numbers summing to 1, got {list(ratios)}", "data.ratios")
    n_train = int(round(ratios[0] * n_windows))
    n_heldout = int(round(ratios[1] * n_windows))
    n_cal = int(round(cal_fraction * n_heldout))
    n_val = n_heldout - n_cal
    n_test = n_windows - n_train - n_heldout
    sizes = {"train": n_train, "val": n_val, "cal": n_cal, "test": n_test}
    empty = [k for k, v in sizes.items() if v <= 0]
    if empty:
        raise ConfigError(f"empty split(s) {empty} for {n_windows} windows", "data.cal_fraction"
                          if empty == ["cal"] else "data.ratios")
    splits, start = {}, 0
    for name in SPLIT_NAMES:
        splits[name] = (start, start + sizes[name])
        start += sizes[name]
    return splits


# ---------------------------------------------------------------- persistence

def save_bundle(bundle: DatasetBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, T, C = bundle.visits.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": bundle.config.model_dump(mode="json"),
        "seed": bundle.seed,
        "shapes": {"visits": [n, T, C], "demographics": list(bundle.demographics.shape),
                   "externals": list(bundle.externals.shape)},
        "splits": {k: list(v) for k, v in bundle.splits.items()},
        "t_in": bundle.t_in,
        "t_out": bundle.t_out,
        "transform": bundle.transform,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    with open(directory / "visits.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "time", "category", "count"])
        counts = bundle.visits.astype(np.int64)
        for i in range(n):
            for t in range(T):
                for c in range(C):
                    w.writerow([i, t, c, int(counts[i, t, c])])

    with open(directory / "demographics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node"] + [f"d{k}" for k in range(bundle.demographics.shape[1])])
        for i, row in enumerate(bundle.demographics):
            w.writerow([i] + [repr(float(v)) for v in row])

    with open(directory / "externals.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "time"] + [f"e{k}" for k in range(bundle.externals.shape[2])])
        for i in range(n):
            for t in range(T):
                w.writerow([i, t] + [repr(float(v)) for v in bundle.externals[i, t]])

    bundle.graph.save(directory / "graph.json")


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n, T, C = manifest["shapes"]["visits"]
    raw = np.loadtxt(directory / "visits.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    visits = np.zeros((n, T, C))
    visits[raw[:, 0], raw[:, 1], raw[:, 2]] = raw[:, 3]
    dem = np.loadtxt(directory / "demographics.csv", delimiter=",", skiprows=1, ndmin=2)
    demographics = dem[np.argsort(dem[:, 0]), 1:]
    ext = np.loadtxt(directory / "externals.csv", delimiter=",", skiprows=1, ndmin=2)
    externals = np.zeros(tuple(manifest["shapes"]["externals"]))
    externals[ext[:, 0].astype(int), ext[:, 1].astype(int)] = ext[:, 2:]
    graph = GraphSpec.load(directory / "graph.json")
    cfg = SyntheticConfig.model_validate(manifest["config"])
    splits = {k: (int(v[0]), int(v[1])) for k, v in manifest["splits"].items()}
    return DatasetBundle(visits, demographics, externals, graph, splits, int(manifest["t_in"]),
                         int(manifest["t_out"]), cfg, int(manifest["seed"]), manifest["transform"])
