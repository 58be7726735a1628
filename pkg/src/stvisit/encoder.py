"""Spatiotemporal context encoder: visits, demographics and externals to node-time embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .graph import normalize_prior
from .nn import EVAL, ChannelMLP, Dropout, ForwardContext, Init, LayerNorm, Linear, Module, activation, node_mix


@dataclass
class ContextInputs:
    """Batched encoder inputs.

    visits (B, N, T, C) already log-transformed, demographics (B, N, d_dem),
    externals (B, N, T, d_ext) and the (N, N) prior adjacency.
    """

    visits: np.ndarray
    demographics: np.ndarray
    externals: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        b, n, t, _ = self.visits.shape
        if self.externals.shape[:3] != (b, n, t):
            raise ShapeError("ContextInputs", f"externals {self.externals.shape} misaligned with visits {self.visits.shape}")
        if self.demographics.shape[:2] != (b, n):
            raise ShapeError("ContextInputs", f"demographics {self.demographics.shape} misaligned with visits {self.visits.shape}")
        if self.prior.shape != (n, n):
            raise ShapeError("ContextInputs", f"prior {self.prior.shape} is not ({n}, {n})")


class STCE(Module):
    def __init__(self, init: Init, n_categories: int, d_dem: int, d_ext: int, d_hid: int = 128,
                 d_model: int = 64, kernel_size: int = 3, dropout: float = 0.3, act: str = "silu",
                 prior_mode: str = "sym-norm+self-loop"):
        self.emb_v = Linear(init, n_categories, d_hid)
        self.emb_d = Linear(init, d_dem, d_hid)
        self.emb_e = Linear(init, d_ext, d_hid)
        self.drop_v = Dropout(init, dropout)
        self.drop_d = Dropout(init, dropout)
        self.drop_e = Dropout(init, dropout)
        self.gconv = Linear(init, d_hid, d_hid)
        self.temporal_kernel = init.uniform((kernel_size, d_hid), kernel_size)
        self.mixer_norm = LayerNorm(init, d_hid)
        self.mixer_mlp = ChannelMLP(init, d_hid, d_hid)
        self.proj = Linear(init, 2 * d_hid, d_model)
        self.proj_norm = LayerNorm(init, d_model)
        self.out = Linear(init, d_model, d_model)
        self.drop_out = Dropout(init, dropout)
        self.act = act
        self.prior_mode = prior_mode

    def embed_inputs(self, inputs: ContextInputs, ctx: ForwardContext = EVAL):
        phi = activation(self.act)
        hv = self.drop_v(phi(self.emb_v(Tensor(inputs.visits))), ctx)
        hd = self.drop_d(phi(self.emb_d(Tensor(inputs.demographics))), ctx)
        he = self.drop_e(phi(self.emb_e(Tensor(inputs.externals))), ctx)
        return hv, hd, he

    @staticmethod
    def fuse_initial(hv: Tensor, hd: Tensor, he: Tensor) -> Tensor:
        b, n, d = hd.shape
        return ad.add(ad.add(hv, ad.reshape(hd, (b, n, 1, d))), he)

    def spatial_encode(self, x: Tensor, prior: np.ndarray) -> Tensor:
        propagation = normalize_prior(prior, self.prior_mode)
        mixed = node_mix(Tensor(propagation), ad.matmul(x, self.gconv.weight))
        return ad.relu(ad.add(mixed, self.gconv.bias))

    def temporal_mix(self, x: Tensor) -> Tensor:
        u = ad.add(ad.depthwise_conv1d(x, self.temporal_kernel), x)
        return ad.add(self.mixer_mlp(self.mixer_norm(u)), u)

    def project_output(self, xhat: Tensor, hd: Tensor, ctx: ForwardContext = EVAL) -> Tensor:
        b, n, t, _ = xhat.shape
        hd_t = ad.broadcast_to(ad.reshape(hd, (b, n, 1, hd.shape[-1])), (b, n, t, hd.shape[-1]))
        z = self.proj_norm(self.proj(ad.concat([xhat, hd_t])))
        return self.drop_out(ad.silu(self.out(z)), ctx)

    def __call__(self, inputs: ContextInputs, ctx: ForwardContext = EVAL) -> Tensor:
        hv, hd, he = self.embed_inputs(inputs, ctx)
        x = self.fuse_initial(hv, hd, he)
        x = self.spatial_encode(x, inputs.prior)
        x = self.temporal_mix(x)
        return self.project_output(x, hd, ctx)


class PlainEmbedding(Module):
    """Affine embedding of visits only; stands in for the encoder in the no-context ablation."""

    def __init__(self, init: Init, n_categories: int, d_model: int):
        self.emb = Linear(init, n_categories, d_model)

    def __call__(self, inputs: ContextInputs, ctx: ForwardContext = EVAL) -> Tensor:
        return self.emb(Tensor(inputs.visits))
