"""Hierarchical graph state-space backbone (U-shaped stack of G-Mamba blocks)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .graph import learn_adjacency
from .nn import EVAL, ChannelMLP, Dropout, ForwardContext, Init, LayerNorm, Linear, Module, node_mix


class SelectiveSSM(Module):
    """Selective diagonal state-space layer.

    Step size, input map and output map all depend on the current input;
    the state matrix is kept negative via ``A = -softplus(A_raw)``.
    """

    def __init__(self, init: Init, d: int, n_state: int = 2):
        self.W_delta = Linear(init, d, d)
        # step sizes start log-uniform in [1e-3, 1e-1]
        dt = np.exp(init.rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        self.W_delta.bias.data = np.log(np.expm1(dt))
        self.W_B = init.uniform((d, n_state), d)
        self.W_C = init.uniform((d, n_state), d)
        self.A_raw = Tensor(np.log(np.expm1(np.tile(np.arange(1, n_state + 1, dtype=float), (d, 1)))),
                            requires_grad=True)
        self.D = init.const((d,), 1.0)

    @property
    def n_state(self) -> int:
        return self.A_raw.shape[1]

    def state_matrix(self) -> Tensor:
        return ad.scale(ad.softplus(self.A_raw), -1.0)

    def __call__(self, x: Tensor, return_states: bool = False):
        return ssm_scan(x, self, return_states)


def ssm_scan(x: Tensor, params: SelectiveSSM, return_states: bool = False):
    """Run the selective recurrence over the time axis of (..., T, d)."""
    delta = ad.softplus(params.W_delta(x))
    B = ad.matmul(x, params.W_B)
    C = ad.matmul(x, params.W_C)
    out = ad.selective_scan(x, delta, params.state_matrix(), B, C, return_states=return_states)
    y, states = out if return_states else (out, None)
    y = ad.add(y, ad.mul(x, params.D))
    return (y, states) if return_states else y


class GMambaBlock(Module):
    """Adaptive-graph spatial mixing, selective SSM temporal mixing, channel mixing.

    With ``spatial=False`` the graph branch is skipped (SSM-only block).
    """

    def __init__(self, init: Init, d: int, n_state: int = 2, lam: float = 0.5, dropout: float = 0.3,
                 spatial: bool = True, d_att: int | None = None):
        self.spatial = spatial
        self.lam = lam
        if spatial:
            d_att = d if d_att is None else d_att
            self.W_u = init.uniform((d, d_att), d)
            self.att = init.uniform((2 * d_att,), 2 * d_att)
            self.gconv = Linear(init, d, d)
        self.ssm = SelectiveSSM(init, d, n_state)
        self.drop_ssm = Dropout(init, dropout)
        self.chan_norm = LayerNorm(init, d)
        self.chan_mlp = ChannelMLP(init, d, d)
        self.drop_chan = Dropout(init, dropout)
        self.proj = Linear(init, d, d)
        self.proj_norm = LayerNorm(init, d)

    def adjacency(self, x: Tensor, prior) -> Tensor:
        return learn_adjacency(x, self.W_u, self.att, prior, self.lam).blended

    def __call__(self, x: Tensor, prior=None, ctx: ForwardContext = EVAL) -> Tensor:
        if self.spatial:
            a_star = self.adjacency(x, prior)
            g = ad.relu(ad.add(node_mix(a_star, ad.matmul(x, self.gconv.weight)), self.gconv.bias))
            g = ad.add(g, x)
        else:
            g = x
        t = ad.add(self.drop_ssm(self.ssm(g), ctx), g)
        c = ad.add(self.drop_chan(self.chan_mlp(self.chan_norm(t)), ctx), t)
        return ad.add(self.proj_norm(self.proj(c)), x)


class BlockStack(Module):
    def __init__(self, blocks: list[GMambaBlock]):
        self.blocks = blocks

    def __call__(self, x: Tensor, prior=None, ctx: ForwardContext = EVAL) -> Tensor:
        for block in self.blocks:
            x = block(x, prior, ctx)
        return x


class DownSample(Module):
    """Stride-2 temporal convolution, kernel 4, doubling the channel width."""

    def __init__(self, init: Init, d_in: int, d_out: int, kernel: int = 4, stride: int = 2):
        self.weight = init.uniform((kernel, d_in, d_out), kernel * d_in)
        self.bias = init.uniform((d_out,), kernel * d_in)
        self.stride = stride

    def __call__(self, y: Tensor) -> Tensor:
        if y.shape[-2] < 2:
            raise ContractError(f"down-sampling needs at least 2 time steps, got {y.shape[-2]}")
        return ad.strided_conv1d(y, self.weight, self.bias, self.stride)


class UpSample(Module):
    """Stride-2 transposed temporal convolution, kernel 4, halving the channel width."""

    def __init__(self, init: Init, d_in: int, d_out: int, kernel: int = 4, stride: int = 2):
        self.weight = init.uniform((kernel, d_in, d_out), kernel * d_in)
        self.bias = init.uniform((d_out,), kernel * d_in)
        self.stride = stride

    def __call__(self, z: Tensor, out_len: int | None = None) -> Tensor:
        return ad.conv_transpose1d(z, self.weight, self.bias, self.stride, out_len)


class FuseSkip(Module):
    """Concatenate encoder and decoder features on channels, project back to width d."""

    def __init__(self, init: Init, d: int):
        self.proj = Linear(init, 2 * d, d)

    def __call__(self, y_enc: Tensor, y_dec: Tensor) -> Tensor:
        if y_enc.shape != y_dec.shape:
            raise ContractError(f"skip shapes differ: {y_enc.shape} vs {y_dec.shape}")
        return self.proj(ad.concat([y_enc, y_dec]))


def scale_widths(d_model: int, n_stages: int) -> list[int]:
    return [d_model * 2 ** s for s in range(n_stages + 1)]


def check_length(t_in: int, n_stages: int) -> None:
    if t_in % (2 ** n_stages):
        raise ConfigError(f"input length {t_in} is not divisible by 2^{n_stages}", "model.n_stages")


class Backbone(Module):
    def __init__(self, init: Init, t_in: int, d_model: int = 64, n_stages: int = 2, depth: int = 2,
                 n_state: int = 2, lam: float = 0.5, dropout: float = 0.3, spatial: bool = True):
        check_length(t_in, n_stages)
        widths = scale_widths(d_model, n_stages)
        self.t_in = t_in
        self.n_stages = n_stages

        def stack(d):
            return BlockStack([GMambaBlock(init, d, n_state, lam, dropout, spatial) for _ in range(depth)])

        self.encoder = [stack(widths[s]) for s in range(n_stages)]
        self.down = [DownSample(init, widths[s], widths[s + 1]) for s in range(n_stages)]
        self.bottleneck = stack(widths[n_stages])
        self.up = [UpSample(init, widths[s + 1], widths[s]) for s in range(n_stages)]
        self.fuse = [FuseSkip(init, widths[s]) for s in range(n_stages)]
        self.decoder = [stack(widths[s]) for s in range(n_stages)]

    def __call__(self, r: Tensor, prior=None, ctx: ForwardContext = EVAL, trace: list | None = None) -> Tensor:
        if r.shape[-2] != self.t_in:
            raise ContractError(f"backbone built for T={self.t_in}, got {r.shape[-2]}")
        skips = []
        x = r
        for s in range(self.n_stages):
            y = self.encoder[s](x, prior, ctx)
            skips.append(y)
            x = self.down[s](y)
            if trace is not None:
                trace.append(("enc", s, y.shape, x.shape))
        z = self.bottleneck(x, prior, ctx)
        if trace is not None:
            trace.append(("bottleneck", self.n_stages, z.shape))
        for s in reversed(range(self.n_stages)):
            y_hat = self.up[s](z, out_len=skips[s].shape[-2])
            z = self.decoder[s](self.fuse[s](skips[s], y_hat), prior, ctx)
            if trace is not None:
                trace.append(("dec", s, y_hat.shape, z.shape))
        return z


class OutputHead(Module):
    """Flatten time and channels per node, then map affinely to (T_out, d_head)."""

    def __init__(self, init: Init, t_in: int, d_model: int, t_out: int = 3, d_head: int | None = None):
        self.t_out = t_out
        self.d_head = d_model if d_head is None else d_head
        self.fc = Linear(init, t_in * d_model, t_out * self.d_head)

    def __call__(self, z: Tensor) -> Tensor:
        b, n, t, d = z.shape
        flat = ad.reshape(z, (b, n, t * d))
        return ad.reshape(self.fc(flat), (b, n, self.t_out, self.d_head))
