"""Minimal parameter containers on top of :mod:`stvisit.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ForwardContext:
    """Mode and randomness for one forward pass.

    Dropout masks come from a counter-based stream keyed by
    ``(seed, op_id, step, pass_index)``, so any pass can be replayed exactly.
    """

    training: bool = False
    seed: int = 0
    step: int = 0
    pass_index: int = 0

    def rng(self, op_id: int) -> np.random.Generator:
        key = np.random.SeedSequence([self.seed, op_id, self.step, self.pass_index])
        return np.random.Generator(np.random.Philox(key))


EVAL = ForwardContext()


class Init:
    """Seeded parameter factory that also hands out dropout op ids."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self._next_op = 0

    def uniform(self, shape, fan_in: int) -> Tensor:
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def const(self, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, float(value)), requires_grad=True)

    def op_id(self) -> int:
        self._next_op += 1
        return self._next_op


class Module:
    """Walks attributes in definition order to enumerate parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, init: Init, d_in: int, d_out: int, bias: bool = True):
        self.weight = init.uniform((d_in, d_out), d_in)
        self.bias = init.uniform((d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, init: Init, d: int):
        self.gamma = init.const((d,), 1.0)
        self.beta = init.const((d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Dropout(Module):
    def __init__(self, init: Init, p: float):
        self.p = p
        self.op_id = init.op_id()

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if not ctx.training or self.p == 0.0:
            return x
        return ad.dropout(x, self.p, True, ctx.rng(self.op_id))


class ChannelMLP(Module):
    """Two affine maps with SiLU between, applied over the last axis."""

    def __init__(self, init: Init, d: int, hidden: int):
        self.fc1 = Linear(init, d, hidden)
        self.fc2 = Linear(init, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.silu(self.fc1(x)))


ACTIVATIONS = {"silu": ad.silu, "gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def node_mix(adjacency: Tensor, x: Tensor) -> Tensor:
    """Apply an (N, N) or (B, N, N) adjacency along the node axis of (B, N, T, d)."""
    b, n, t, d = x.shape
    flat = ad.reshape(x, (b, n, t * d))
    return ad.reshape(ad.matmul(adjacency, flat), (b, n, t, d))
