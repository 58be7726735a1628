"""Validated configuration documents (one JSON file drives every command)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

CATEGORY_NAMES = ("ambulatory", "hospital", "nursing", "social")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Shock(_Strict):
    kind: Literal["drop", "surge"]
    start: int = Field(ge=0)
    duration: int = Field(ge=1)
    multiplier: float = Field(gt=0)
    nodes: list[int] | None = None
    categories: list[int] | None = None

    @model_validator(mode="after")
    def _direction(self):
        if self.kind == "drop" and not self.multiplier < 1:
            raise ValueError("a drop shock needs multiplier < 1")
        if self.kind == "surge" and not self.multiplier > 1:
            raise ValueError("a surge shock needs multiplier > 1")
        return self


class SyntheticConfig(_Strict):
    n_nodes: int = Field(20, ge=2)
    n_steps: int = Field(600, ge=2)
    n_categories: int = Field(4, ge=1)
    seed: int | None = None
    base_rates: list[float] | None = None
    weekly_amplitude: float = Field(0.3, ge=0)
    monthly_amplitude: float = Field(0.2, ge=0)
    spatial_length: float | None = Field(None, gt=0)
    noise_dispersion: float = Field(0.1, ge=0)
    drift_scale: float = Field(0.1, ge=0)
    external_effect: float = Field(0.1, ge=0)
    extent: float = Field(100.0, gt=0)
    d_dem: int = Field(32, ge=1)
    d_ext: int = Field(16, ge=1)
    graph_sigma: float | None = Field(None, gt=0)
    graph_epsilon: float = Field(0.1, ge=0, le=1)
    shocks: list[Shock] = Field(default_factory=list)
    ratios: list[float] = Field(default_factory=lambda: [0.8, 0.1, 0.1])
    cal_fraction: float = Field(0.5, ge=0, le=1)

    @field_validator("base_rates")
    @classmethod
    def _rates(cls, v):
        if v is not None and any(r <= 0 for r in v):
            raise ValueError("base rates must be positive")
        return v

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v):
        if len(v) != 3 or any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"train/val/test ratios must be 3 nonnegative numbers summing to 1, got {v}")
        return v

    @model_validator(mode="after")
    def _consistency(self):
        if self.base_rates is not None and len(self.base_rates) != self.n_categories:
            raise ValueError(f"base_rates has {len(self.base_rates)} entries for {self.n_categories} categories")
        for shock in self.shocks:
            if shock.nodes and max(shock.nodes) >= self.n_nodes:
                raise ValueError("shock references a node outside the graph")
            if shock.categories and max(shock.categories) >= self.n_categories:
                raise ValueError("shock references an unknown category")
        return self

    def rates(self) -> list[float]:
        if self.base_rates is not None:
            return list(self.base_rates)
        default = [120.0, 60.0, 40.0, 30.0]
        return [default[i % 4] for i in range(self.n_categories)]

    def category_names(self) -> list[str]:
        return [CATEGORY_NAMES[i] if i < 4 else f"cat{i}" for i in range(self.n_categories)]


class ModelConfig(_Strict):
    t_in: int = Field(7, ge=1)
    t_out: int = Field(3, ge=1)
    d_model: int = Field(64, ge=1)
    d_hid: int = Field(128, ge=1)
    n_stages: int = Field(2, ge=0)
    depth: int = Field(2, ge=1)
    temporal_kernel: int = Field(3, ge=1)
    n_state: int = Field(2, ge=1)
    lam: float = Field(0.5, ge=0, le=1)
    dropout: float = Field(0.3, ge=0, lt=1)
    activation: Literal["silu", "gelu", "relu", "tanh"] = "silu"
    prior_mode: Literal["raw", "sym-norm", "sym-norm+self-loop"] = "sym-norm+self-loop"

    @property
    def pad_to(self) -> int:
        unit = 2 ** self.n_stages
        return -(-self.t_in // unit) * unit


class UqConfig(_Strict):
    alpha: float = Field(0.1, gt=0, lt=1)
    mc_passes: int = Field(20, ge=1)
    sigma_floor: float = Field(1e-4, gt=0)
    residual_epsilon: float = Field(1e-6, gt=0)
    loss_weights: dict[str, float] = Field(
        default_factory=lambda: {"quant": 1.0, "nll": 1.0, "param": 1.0, "calib": 1.0})

    @field_validator("loss_weights")
    @classmethod
    def _weights(cls, v):
        unknown = set(v) - {"quant", "nll", "param", "calib"}
        if unknown:
            raise ValueError(f"unknown loss components {sorted(unknown)}")
        if any(w < 0 for w in v.values()):
            raise ValueError("loss weights must be nonnegative")
        return {k: float(v.get(k, 1.0)) for k in ("quant", "nll", "param", "calib")}


class TrainConfig(_Strict):
    batch_size: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_gamma: float = Field(0.5, gt=0, le=1)
    lr_step_epochs: int = Field(15, ge=1)
    weight_decay: float = Field(5e-4, ge=0)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(50, ge=1)
    clip_norm: float = Field(1.0, gt=0)
    train_mc_passes: int = Field(2, ge=1)
    seed: int | None = None


VARIANTS = ("full", "w/o STCE", "w/o G-Mamba", "w/o Node-based",
            "w/o Distribution-based", "w/o Parameter-based", "w/o UQ")


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    variant: str = "full"
    data: SyntheticConfig = Field(default_factory=SyntheticConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    uq: UqConfig = Field(default_factory=UqConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("variant")
    @classmethod
    def _variant(cls, v):
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {list(VARIANTS)}")
        return v

    @model_validator(mode="after")
    def _windows(self):
        if self.data.n_steps < self.model.t_in + self.model.t_out + 1:
            raise ValueError("n_steps must exceed t_in + t_out")
        return self

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _first_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    loc = ".".join(str(p) for p in err["loc"]) or None
    return ConfigError(err["msg"], loc)


def parse_config(doc: dict, model=RunConfig):
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        raise _first_error(exc) from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply dotted overrides."""
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    for dotted, value in (overrides or {}).items():
        target = doc
        *parents, leaf = dotted.split(".")
        for key in parents:
            target = target.setdefault(key, {})
        target[leaf] = value
    return parse_config(doc)
