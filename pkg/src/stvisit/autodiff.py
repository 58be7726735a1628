"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record themselves on the innermost active :class:`Tape` whenever at least
one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how inference runs.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(x * x)
    >>> backward(tape, loss)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericError, ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array with optional gradient state."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        # break output <-> node cycles so activations are freed by refcounting
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


_local = threading.local()


def _active_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _active_stack()
    return stack[-1] if stack else None


def _finite(op: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(op, "numeric overflow: non-finite output")
    return out


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    result = Tensor(_finite(op, out))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(op, tuple(inputs), result, backward_fn)
        result._node = node
        tape.nodes.append(node)
    return result


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return unbroadcast(g / b.data, a.shape), unbroadcast(gb, b.shape)

    return _emit("div", (a, b), out, bw)


def scale(x: Tensor, k: float) -> Tensor:
    return _emit("scale", (x,), x.data * k, lambda g: (g * k,))


def add_scalar(x: Tensor, k: float) -> Tensor:
    return _emit("add_scalar", (x,), x.data + k, lambda g: (g,))


def pow_scalar(x: Tensor, p: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.data, p)
    return _emit("pow", (x,), out, lambda g: (g * p * np.power(x.data, p - 1),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", (x,), out, lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    return _emit("softplus", (x,), np.logaddexp(0.0, x.data), lambda g: (g * expit(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _emit("silu", (x,), x.data * s, lambda g: (g * (s + x.data * s * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _emit("gelu", (x,), x.data * cdf, lambda g: (g * (cdf + x.data * pdf),))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"contracting axes differ: a[-1]={a.shape[-1]} vs b[-2]={b.shape[-2]}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"batch axes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if a.ndim > 2 and b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation for rank {x.ndim}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _emit("broadcast_to", (x,), out, lambda g: (unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"non-concat axes differ: {ref} vs {t.shape} (axis {axis})")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError("split", f"sizes {list(sizes)} do not sum to axis {axis} extent {x.shape[ax]}")
    parts = []
    start = 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + n)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        parts.append(_emit("split", (x,), x.data[index].copy(), bw))
        start += n
    return parts


def sum_(x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(out, dtype=np.float64), bw)


def mean(x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    # divide like np.mean so reductions agree bit for bit with plain numpy scores
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("mean", (x,), np.asarray(out, dtype=np.float64), bw)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"scale/shift must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def bw(g):
        gxhat = g * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, bw)


# ---------------------------------------------------------------- temporal convolutions
# Layout convention: (..., T, channels) with time on axis -2.

def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel temporal convolution with zero "same" padding.

    ``kernel`` has shape (k, d); tap ``j`` reads ``x[t + j - (k-1)//2]``.
    """
    if x.ndim < 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError("depthwise_conv1d", f"kernel {kernel.shape} incompatible with input {x.shape}")
    k, T = kernel.shape[0], x.shape[-2]
    left = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(left, k - 1 - left), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += kernel.data[j] * xp[..., j:j + T, :]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for j in range(k):
            gxp[..., j:j + T, :] += g * kernel.data[j]
            gk[j] = (g * xp[..., j:j + T, :]).reshape(-1, g.shape[-1]).sum(axis=0)
        return gxp[..., left:left + T, :], gk

    return _emit("depthwise_conv1d", (x, kernel), out, bw)


def _conv_geometry(T: int, k: int, stride: int) -> tuple[int, int, int]:
    left = max(0, (k - stride) // 2)
    t_out = -(-T // stride)
    right = max(0, (t_out - 1) * stride + k - T - left)
    return left, right, t_out


def strided_conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Temporal convolution with stride; maps (..., T, d_in) to (..., ceil(T/stride), d_out).

    ``weight`` has shape (k, d_in, d_out); output step ``o`` reads inputs
    ``o*stride + j - left`` for taps ``j`` with ``left = (k - stride)//2``.
    """
    if x.ndim < 2 or weight.ndim != 3 or weight.shape[1] != x.shape[-1]:
        raise ShapeError("strided_conv1d", f"weight {weight.shape} incompatible with input {x.shape}")
    k, d_in, d_out = weight.shape
    if bias.shape != (d_out,):
        raise ShapeError("strided_conv1d", f"bias shape {bias.shape} != ({d_out},)")
    T = x.shape[-2]
    left, right, t_out = _conv_geometry(T, k, stride)
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    span = stride * (t_out - 1) + 1
    out = np.zeros(x.shape[:-2] + (t_out, d_out))
    for j in range(k):
        out += xp[..., j:j + span:stride, :] @ weight.data[j]
    out += bias.data

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        flat_g = g.reshape(-1, d_out)
        for j in range(k):
            gxp[..., j:j + span:stride, :] += g @ weight.data[j].T
            gw[j] = xp[..., j:j + span:stride, :].reshape(-1, d_in).T @ flat_g
        return gxp[..., left:left + T, :], gw, flat_g.sum(axis=0)

    return _emit("strided_conv1d", (x, weight, bias), out, bw)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2,
                     out_len: int | None = None) -> Tensor:
    """Transposed temporal convolution, the adjoint stencil of :func:`strided_conv1d`.

    Maps (..., T', d_in) to (..., stride*T', d_out); ``out_len`` trims
    trailing frames.
    """
    if x.ndim < 2 or weight.ndim != 3 or weight.shape[1] != x.shape[-1]:
        raise ShapeError("conv_transpose1d", f"weight {weight.shape} incompatible with input {x.shape}")
    k, d_in, d_out = weight.shape
    if bias.shape != (d_out,):
        raise ShapeError("conv_transpose1d", f"bias shape {bias.shape} != ({d_out},)")
    T = x.shape[-2]
    left = max(0, (k - stride) // 2)
    full_len = (T - 1) * stride + k
    length = stride * T if out_len is None else out_len
    if length > stride * T or length < 1:
        raise ShapeError("conv_transpose1d", f"out_len {length} outside [1, {stride * T}]")
    span = stride * (T - 1) + 1
    full = np.zeros(x.shape[:-2] + (full_len, d_out))
    for j in range(k):
        full[..., j:j + span:stride, :] += x.data @ weight.data[j]
    out = full[..., left:left + length, :] + bias.data

    def bw(g):
        gfull = np.zeros(g.shape[:-2] + (full_len, d_out))
        gfull[..., left:left + length, :] = g
        gx = np.zeros_like(x.data)
        gw = np.empty_like(weight.data)
        flat_x = x.data.reshape(-1, d_in)
        for j in range(k):
            sl = gfull[..., j:j + span:stride, :]
            gx += sl @ weight.data[j].T
            gw[j] = flat_x.T @ sl.reshape(-1, d_out)
        return gx, gw, g.reshape(-1, d_out).sum(axis=0)

    return _emit("conv_transpose1d", (x, weight, bias), out, bw)


# ---------------------------------------------------------------- stochastic

def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``training`` is false or ``p`` is 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------- selective scan

def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   return_states: bool = False):
    """Diagonal selective state-space recurrence, one left-to-right pass.

    Shapes: ``x``, ``delta`` (..., T, d); ``A`` (d, n); ``B``, ``C`` (..., T, n).
    For each step ``h_t = exp(delta_t A) * h_{t-1} + (delta_t x_t) B_t`` per
    channel and ``y_t = <C_t, h_t>``. Costs O(T d n).
    """
    if x.shape != delta.shape or x.ndim < 2:
        raise ShapeError("selective_scan", f"x {x.shape} and delta {delta.shape} must match")
    d, n = A.shape
    if x.shape[-1] != d or B.shape != x.shape[:-1] + (n,) or C.shape != B.shape:
        raise ShapeError("selective_scan", f"A {A.shape}, B {B.shape}, C {C.shape} incompatible with x {x.shape}")
    T = x.shape[-2]
    xs = np.moveaxis(x.data, -2, 0)          # (T, ..., d)
    ds = np.moveaxis(delta.data, -2, 0)
    Bs = np.moveaxis(B.data, -2, 0)          # (T, ..., n)
    Cs = np.moveaxis(C.data, -2, 0)
    decay = np.exp(ds[..., None] * A.data)   # (T, ..., d, n)
    drive = (ds * xs)[..., None] * Bs[..., None, :]
    states = np.empty_like(decay)
    h = np.zeros(decay.shape[1:])
    for t in range(T):
        h = decay[t] * h + drive[t]
        states[t] = h
    ys = np.einsum("t...dn,t...n->t...d", states, Cs)

    def bw(g):
        gs = np.moveaxis(g, -2, 0)
        gx = np.empty_like(xs)
        gd = np.empty_like(ds)
        gB = np.empty_like(Bs)
        gC = np.einsum("t...d,t...dn->t...n", gs, states)
        gA = np.zeros_like(A.data)
        gh = np.zeros(decay.shape[1:])
        for t in range(T - 1, -1, -1):
            gh = gh + gs[t][..., None] * Cs[t][..., None, :]
            prev = states[t - 1] if t > 0 else 0.0
            g_decay = gh * prev * decay[t]
            g_dx = np.einsum("...dn,...n->...d", gh, Bs[t])
            gB[t] = np.einsum("...dn,...d->...n", gh, ds[t] * xs[t])
            gd[t] = np.einsum("...dn,dn->...d", g_decay, A.data) + g_dx * xs[t]
            gx[t] = g_dx * ds[t]
            gA += (g_decay * ds[t][..., None]).reshape(-1, d, n).sum(axis=0)
            gh = gh * decay[t]
        return (np.moveaxis(gx, 0, -2), np.moveaxis(gd, 0, -2), gA,
                np.moveaxis(gB, 0, -2), np.moveaxis(gC, 0, -2))

    y = _emit("selective_scan", (x, delta, A, B, C), np.moveaxis(ys, 0, -2), bw)
    if return_states:
        return y, np.moveaxis(states, 0, -3)
    return y


# ---------------------------------------------------------------- registry

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "scale": scale, "add_scalar": add_scalar, "pow": pow_scalar,
    "concat": concat, "split": split, "sum": sum_, "mean": mean,
    "exp": exp, "log": log, "softplus": softplus, "sigmoid": sigmoid,
    "relu": relu, "leaky_relu": leaky_relu, "silu": silu, "gelu": gelu, "tanh": tanh,
    "softmax": softmax, "layer_norm": layer_norm,
    "depthwise_conv1d": depthwise_conv1d, "strided_conv1d": strided_conv1d,
    "conv_transpose1d": conv_transpose1d, "dropout": dropout,
    "reshape": reshape, "transpose": transpose, "broadcast_to": broadcast_to,
    "selective_scan": selective_scan,
}

_LIST_INPUT = {"concat"}


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs):
    """Dispatch an op by name: ``forward_op("leaky_relu", [x], slope=0.2)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    if kind in _LIST_INPUT:
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf, then reset the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or not tape.nodes or all(n is not loss._node for n in tape.nodes):
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.reset()


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-8, fraction: float = 1.0,
               seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per entry is |a-b| / max(|a|, |b|, floor); the report holds
    the worst entry for each input. A ``floor`` near the finite-difference
    round-off (about eps*|f|/h) keeps vanishing gradients from failing on noise.
    With ``fraction < 1`` only a random subset of entries is probed.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    backward(tape, out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    errors = []
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        worst = 0.0
        probe = range(flat.size)
        if fraction < 1.0:
            probe = rng.choice(flat.size, size=max(1, int(round(fraction * flat.size))), replace=False)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(*inputs).data)
            flat[i] = orig - h
            down = float(f(*inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[i]), floor)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
        errors.append(worst)
    for t in inputs:
        t.grad = None
    return GradCheckReport(errors, tol)
