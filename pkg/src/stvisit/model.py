"""The full forecaster: encoder, backbone, shared trunk and uncertainty heads."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .backbone import Backbone, OutputHead
from .config import ModelConfig, UqConfig
from .data import DatasetBundle, WindowSet, log_transform
from .encoder import STCE, ContextInputs, PlainEmbedding
from .errors import ParameterError
from .graph import normalize_prior
from .nn import EVAL, ForwardContext, Init, Module
from .uncertainty import GaussianHead, McDecomposition, QuantileHeads, decompose_passes


@dataclass(frozen=True)
class VariantSpec:
    """How an ablation variant changes architecture, losses and interval source."""

    name: str
    use_context: bool = True
    spatial: bool = True
    disabled_losses: tuple[str, ...] = ()
    interval_source: str = "quantile"
    mc_enabled: bool = True
    calibrate: bool = True
    gaussian_reported: bool = True
    constant_sigma: bool = False


VARIANT_SPECS = {
    "full": VariantSpec("full"),
    "w/o STCE": VariantSpec("w/o STCE", use_context=False),
    "w/o G-Mamba": VariantSpec("w/o G-Mamba", spatial=False),
    "w/o Node-based": VariantSpec("w/o Node-based", disabled_losses=("quant",), interval_source="gaussian"),
    "w/o Distribution-based": VariantSpec("w/o Distribution-based", disabled_losses=("nll", "calib"),
                                          constant_sigma=True),
    "w/o Parameter-based": VariantSpec("w/o Parameter-based", disabled_losses=("param",), mc_enabled=False),
    "w/o UQ": VariantSpec("w/o UQ", disabled_losses=("nll", "param", "calib"), mc_enabled=False,
                          calibrate=False, gaussian_reported=False),
}


def variant_spec(name: str) -> VariantSpec:
    try:
        return VARIANT_SPECS[name]
    except KeyError:
        raise ParameterError(f"unknown variant {name!r}; choose from {list(VARIANT_SPECS)}") from None


@dataclass
class HeadOutputs:
    """Log-scale head outputs, each (B, N, T_out, C)."""

    lower: Tensor
    median: Tensor
    upper: Tensor
    mu: Tensor
    sigma2: Tensor


class VisitForecaster(Module):
    def __init__(self, cfg: ModelConfig, uq: UqConfig, n_categories: int, d_dem: int, d_ext: int,
                 seed: int = 0, variant: str = "full"):
        self.variant = variant_spec(variant)
        self.cfg = cfg
        self.uq = uq
        init = Init(seed)
        t_pad = cfg.pad_to
        if self.variant.use_context:
            self.encoder = STCE(init, n_categories, d_dem, d_ext, cfg.d_hid, cfg.d_model,
                                cfg.temporal_kernel, cfg.dropout, cfg.activation, cfg.prior_mode)
        else:
            self.encoder = PlainEmbedding(init, n_categories, cfg.d_model)
        self.backbone = Backbone(init, t_pad, cfg.d_model, cfg.n_stages, cfg.depth, cfg.n_state,
                                 cfg.lam, cfg.dropout, spatial=self.variant.spatial)
        self.trunk = OutputHead(init, t_pad, cfg.d_model, cfg.t_out)
        self.quantile = QuantileHeads(init, self.trunk.d_head, n_categories)
        self.gaussian = GaussianHead(init, self.trunk.d_head, n_categories, uq.sigma_floor)

    def __call__(self, inputs: ContextInputs, ctx: ForwardContext = EVAL) -> HeadOutputs:
        r = self.encoder(inputs, ctx)
        # degree-normalized prior so it blends on the same scale as the learned graph
        z = self.backbone(r, normalize_prior(inputs.prior, "sym-norm"), ctx)
        features = self.trunk(z)
        lower, median, upper = self.quantile(features)
        mu, sigma2 = self.gaussian(features)
        if self.variant.constant_sigma:
            sigma2 = Tensor(np.ones(sigma2.shape))
        return HeadOutputs(lower, median, upper, mu, sigma2)

    @property
    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def make_inputs(bundle: DatasetBundle, windows: WindowSet, index) -> tuple[ContextInputs, np.ndarray]:
    """Batch of log-scale inputs and log-scale targets for window ``index`` (array or slice)."""
    visits = log_transform(windows.visits[index])
    externals = windows.externals[index]
    b, n = visits.shape[:2]
    demographics = np.broadcast_to(bundle.demographics, (b, n, bundle.demographics.shape[1])).copy()
    inputs = ContextInputs(visits, demographics, externals, bundle.graph.adjacency)
    return inputs, log_transform(windows.targets[index])


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def predict_log(model: VisitForecaster, bundle: DatasetBundle, windows: WindowSet, indices,
                ctx: ForwardContext = EVAL, batch_size: int = 128) -> dict[str, np.ndarray]:
    """Head outputs on the log scale for the given windows, stacked along axis 0."""
    indices = np.asarray(indices)
    parts: dict[str, list[np.ndarray]] = {k: [] for k in ("lower", "median", "upper", "mu", "sigma2")}
    for batch in _batches(indices, batch_size):
        inputs, _ = make_inputs(bundle, windows, batch)
        out = model(inputs, ctx)
        for k in parts:
            parts[k].append(getattr(out, k).data)
    return {k: np.concatenate(v, axis=0) for k, v in parts.items()}


def mc_dropout_predict(model: VisitForecaster, inputs: ContextInputs, passes: int, seed: int,
                       workers: int = 1) -> McDecomposition:
    """Stochastic passes with dropout active on one batch; reduction runs in pass order."""
    if passes < 2:
        raise ParameterError(f"MC dropout needs at least 2 passes, got {passes}")

    def one(m: int):
        out = model(inputs, ForwardContext(training=True, seed=seed, step=0, pass_index=m))
        return out.mu.data, out.sigma2.data

    results = _run_passes(one, passes, workers)
    return decompose_passes([r[0] for r in results], [r[1] for r in results])


def _run_passes(fn, passes: int, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, range(passes)))
    return [fn(m) for m in range(passes)]


def mc_dropout_windows(model: VisitForecaster, bundle: DatasetBundle, windows: WindowSet, indices,
                       passes: int, seed: int, workers: int = 1, batch_size: int = 128) -> McDecomposition:
    """:func:`mc_dropout_predict` over many windows, batched."""
    if passes < 2:
        raise ParameterError(f"MC dropout needs at least 2 passes, got {passes}")

    def one(m: int):
        ctx = ForwardContext(training=True, seed=seed, step=0, pass_index=m)
        out = predict_log(model, bundle, windows, indices, ctx, batch_size)
        return out["mu"], out["sigma2"]

    results = _run_passes(one, passes, workers)
    return decompose_passes([r[0] for r in results], [r[1] for r in results])
