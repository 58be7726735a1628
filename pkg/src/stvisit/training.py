"""Optimization: Adam, global-norm clipping, step-decay schedule, early stopping, checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import DatasetBundle, WindowSet
from .errors import ContractError, NumericError
from .model import VisitForecaster, make_inputs
from .nn import EVAL, ForwardContext
from .uncertainty import calib_loss, nll_loss, norm_ppf, param_loss, pinball_loss, quantile_levels, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STVCKPT\x00"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "lr", "total", "quant", "nll", "param", "calib", "val_total")


# ---------------------------------------------------------------- optimizer pieces

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """Bias-corrected Adam update applied in place; ``weight_decay`` is decoupled."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= lr * update
    return state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    if clip_norm <= 0:
        raise ContractError(f"clip norm must be positive, got {clip_norm}")
    norm = global_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        return {k: g * factor for k, g in grads.items()}
    return grads


def lr_at(epoch: int, lr0: float = 1e-3, gamma: float = 0.5, step_epochs: int = 15) -> float:
    """Step decay: ``lr0 * gamma ** (epoch // step_epochs)`` for 0-based ``epoch``."""
    return lr0 * gamma ** (epoch // step_epochs)


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record a validation value; True when training should stop."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    adam_step: int
    epoch: int
    best_val: float
    config: dict

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for kind, arrays in (("param", self.params), ("moment", self.moments)):
            for name, arr in arrays.items():
                raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
                blobs.append(raw)
                offset += len(raw)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "best_val": self.best_val,
            "adam_step": self.adam_step,
            "config": self.config,
            "tensors": entries,
        }
        head = json.dumps(header, sort_keys=True).encode()
        return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != CHECKPOINT_MAGIC:
            raise ContractError("not a stvisit checkpoint")
        (n,) = struct.unpack("<Q", buf[8:16])
        header = json.loads(buf[16:16 + n])
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header['format_version']}")
        base = 16 + n
        params, moments = {}, {}
        for e in header["tensors"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=base + e["offset"])
            arr = arr.astype(np.float64).reshape(e["shape"])
            (params if e["kind"] == "param" else moments)[e["name"]] = arr
        return cls(params, moments, header["adam_step"], header["epoch"], header["best_val"], header["config"])

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def model_config_echo(cfg: RunConfig, bundle: DatasetBundle) -> dict:
    return {
        "run": cfg.model_dump(mode="json"),
        "n_categories": bundle.n_categories,
        "d_dem": int(bundle.demographics.shape[1]),
        "d_ext": int(bundle.externals.shape[2]),
    }


def build_model(cfg: RunConfig, n_categories: int, d_dem: int, d_ext: int) -> VisitForecaster:
    return VisitForecaster(cfg.model, cfg.uq, n_categories, d_dem, d_ext, seed=cfg.train_seed,
                           variant=cfg.variant)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[VisitForecaster, RunConfig]:
    cfg = RunConfig.model_validate(ckpt.config["run"])
    model = build_model(cfg, ckpt.config["n_categories"], ckpt.config["d_dem"], ckpt.config["d_ext"])
    model.load_state_dict(ckpt.params)
    return model, cfg


# ---------------------------------------------------------------- losses per batch

def effective_weights(cfg: RunConfig, model: VisitForecaster) -> dict[str, float]:
    weights = dict(cfg.uq.loss_weights)
    for name in model.variant.disabled_losses:
        weights[name] = 0.0
    return weights


def train_passes(cfg: RunConfig, model: VisitForecaster) -> int:
    if not model.variant.mc_enabled or cfg.model.dropout == 0.0:
        return 1
    return cfg.train.train_mc_passes


def batch_losses(model: VisitForecaster, inputs, targets: np.ndarray, cfg: RunConfig,
                 weights: dict[str, float], passes: int, ctx_base: ForwardContext) -> dict[str, ad.Tensor]:
    levels = quantile_levels(cfg.uq.alpha)
    y = ad.Tensor(targets)
    outs = [model(inputs, ForwardContext(ctx_base.training, ctx_base.seed, ctx_base.step, m))
            for m in range(passes)]

    def averaged(fn):
        terms = [fn(o) for o in outs]
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return acc if len(terms) == 1 else ad.scale(acc, 1.0 / len(terms))

    comps: dict[str, ad.Tensor] = {}
    if weights.get("quant", 1.0):
        comps["quant"] = averaged(lambda o: pinball_loss([o.lower, o.median, o.upper], y, levels))
    if weights.get("nll", 1.0):
        comps["nll"] = averaged(lambda o: nll_loss(o.mu, o.sigma2, y))
    if weights.get("param", 1.0) and passes >= 2:
        comps["param"] = param_loss([o.mu for o in outs])
    if weights.get("calib", 1.0):
        comps["calib"] = averaged(lambda o: calib_loss(o.mu, ad.pow_scalar(o.sigma2, 0.5), y,
                                                       cfg.uq.residual_epsilon))
    return comps


def validation_loss(model: VisitForecaster, bundle: DatasetBundle, windows: WindowSet, indices: np.ndarray,
                    cfg: RunConfig, weights: dict[str, float]) -> float:
    total, count = 0.0, 0
    for start in range(0, len(indices), cfg.train.batch_size):
        batch = indices[start:start + cfg.train.batch_size]
        inputs, targets = make_inputs(bundle, windows, batch)
        comps = batch_losses(model, inputs, targets, cfg, weights, 1, EVAL)
        total += float(total_loss(comps, weights).data) * len(batch)
        count += len(batch)
    return total / count


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    stopped_early: bool

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(HISTORY_FIELDS), lineterminator="\n")
        w.writeheader()
        for row in self.history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def init_head_biases(model: VisitForecaster, bundle: DatasetBundle, windows: WindowSet, indices: np.ndarray,
                     alpha: float) -> None:
    """Start the output heads at per-category training statistics of the log targets.

    Medians and Gaussian means start at the category mean; interval gaps start at the
    normal quantile times the spread of a persistence forecast's log error.
    """
    _, targets = make_inputs(bundle, windows, indices)
    last = np.log1p(windows.visits[indices][:, :, -1:, :])
    centre = targets.mean(axis=(0, 1, 2))
    spread = np.maximum(np.sqrt(np.mean((targets - last) ** 2, axis=(0, 1, 2))), 1e-3)
    gap = norm_ppf(1.0 - alpha / 2.0) * spread
    inv_softplus = np.log(np.expm1(gap))
    model.quantile.median.bias.data[...] = centre
    model.quantile.gap_lower.bias.data[...] = inv_softplus
    model.quantile.gap_upper.bias.data[...] = inv_softplus
    model.gaussian.mean.bias.data[...] = centre
    model.gaussian.var.bias.data[...] = np.log(np.expm1(np.maximum(spread ** 2, 1e-6)))


def train(model: VisitForecaster, bundle: DatasetBundle, windows: WindowSet, cfg: RunConfig,
          val_fn: Callable[[int], float] | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize the total loss over the train split with early stopping on validation loss.

    ``val_fn(epoch)`` replaces the validation computation (used by tests).
    ``on_epoch(row)`` sees each history row; a truthy return ends training.
    The model is left holding the best parameters.
    """
    tc = cfg.train
    seed = cfg.train_seed
    lo, hi = bundle.splits["train"]
    train_idx = np.arange(lo, hi)
    v_lo, v_hi = bundle.splits["val"]
    val_idx = np.arange(v_lo, v_hi)
    if len(train_idx) == 0 or (val_fn is None and len(val_idx) == 0):
        raise ContractError("train and validation splits must be non-empty")

    init_head_biases(model, bundle, windows, train_idx, cfg.uq.alpha)
    named = dict(model.named_parameters())
    weights = effective_weights(cfg, model)
    passes = train_passes(cfg, model)
    state = AdamState()
    stopper = EarlyStopping(tc.patience)
    best_params = {k: p.data.copy() for k, p in named.items()}
    best_moments: dict[str, np.ndarray] = {}
    best_step = 0
    history: list[dict] = []
    stopped = False
    step = 0

    for epoch in range(tc.max_epochs):
        lr = lr_at(epoch, tc.lr, tc.lr_gamma, tc.lr_step_epochs)
        order = np.random.default_rng([seed, epoch]).permutation(train_idx)
        sums = dict.fromkeys(("total", "quant", "nll", "param", "calib"), 0.0)
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            inputs, targets = make_inputs(bundle, windows, batch)
            with ad.Tape() as tape:
                comps = batch_losses(model, inputs, targets, cfg, weights, passes,
                                     ForwardContext(training=True, seed=seed, step=step))
                loss = total_loss(comps, weights)
            ad.backward(tape, loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
            model.zero_grad()
            grads = clip_gradients(grads, tc.clip_norm)
            adam_step({k: p.data for k, p in named.items()}, grads, state, lr, weight_decay=tc.weight_decay)
            step += 1
            sums["total"] += float(loss.data) * len(batch)
            for k, v in comps.items():
                sums[k] += float(v.data) * len(batch)
        row = {"epoch": epoch + 1, "lr": lr}
        row.update({k: v / len(order) for k, v in sums.items()})
        val = val_fn(epoch + 1) if val_fn is not None else validation_loss(
            model, bundle, windows, val_idx, cfg, weights)
        if not np.isfinite(val):
            raise NumericError("validation loss")
        row["val_total"] = float(val)
        history.append(row)
        halt = bool(on_epoch(row)) if on_epoch is not None else False
        log.debug("epoch %d total %.5f val %.5f", epoch + 1, row["total"], val)
        improved = val < stopper.best
        if stopper.update(epoch + 1, val):
            stopped = True
        if improved:
            best_params = {k: p.data.copy() for k, p in named.items()}
            best_moments = {f"m/{k}": a.copy() for k, a in state.m.items()}
            best_moments.update({f"v/{k}": a.copy() for k, a in state.v.items()})
            best_step = state.step
        if stopped or halt:
            break

    model.load_state_dict(best_params)
    ckpt = Checkpoint(best_params, best_moments, best_step, stopper.best_epoch, float(stopper.best),
                      model_config_echo(cfg, bundle))
    return TrainResult(ckpt, history, stopped)
