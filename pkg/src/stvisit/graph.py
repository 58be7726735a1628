"""Prior spatial graph and adaptive graph learning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError

LEAKY_SLOPE = 0.2


@dataclass
class GraphSpec:
    coords: np.ndarray
    sigma: float
    epsilon: float
    adjacency: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "sigma": float(self.sigma),
            "epsilon": float(self.epsilon),
            "coords": self.coords.tolist(),
            "adjacency": self.adjacency.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GraphSpec":
        n = int(doc["n_nodes"])
        coords = np.asarray(doc["coords"], dtype=np.float64).reshape(n, -1)
        adjacency = np.asarray(doc["adjacency"], dtype=np.float64).reshape(n, n)
        return cls(coords, float(doc["sigma"]), float(doc["epsilon"]), adjacency)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "GraphSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def median_distance(coords: np.ndarray) -> float:
    d = pairwise_distances(coords)
    return float(np.median(d[np.triu_indices(len(coords), k=1)]))


def build_gaussian_adjacency(coords, sigma: float | None = None, epsilon: float = 0.1) -> GraphSpec:
    """Thresholded Gaussian-kernel adjacency over Euclidean centroid distance.

    Weights below ``epsilon`` and the diagonal are zero. ``sigma`` defaults to
    the median pairwise distance.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 2:
        raise ContractError("need at least 2 nodes with planar coordinates")
    if sigma is None:
        sigma = median_distance(coords)
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
    d = pairwise_distances(coords)
    weights = np.exp(-(d * d) / (sigma * sigma))
    weights[weights < epsilon] = 0.0
    np.fill_diagonal(weights, 0.0)
    return GraphSpec(coords, float(sigma), float(epsilon), weights)


def normalize_prior(adjacency: np.ndarray, mode: str = "sym-norm+self-loop") -> np.ndarray:
    """Fixed propagation matrix used by the encoder's graph convolution."""
    if mode == "raw":
        return adjacency.copy()
    if mode == "sym-norm":
        a = adjacency
    elif mode == "sym-norm+self-loop":
        a = adjacency + np.eye(len(adjacency))
    else:
        raise ParameterError(f"unknown adjacency normalization {mode!r}")
    deg = a.sum(axis=1)
    deg = np.where(deg > 0, deg, 1.0)
    inv = 1.0 / np.sqrt(deg)
    return inv[:, None] * a * inv[None, :]


def pool_node_embedding(x: Tensor) -> Tensor:
    """Mean over the time axis: (..., N, T, d) -> (..., N, d)."""
    return ad.mean(x, axis=-2)


def adaptive_affinity(u: Tensor, W_u: Tensor, a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    """Row-stochastic attention affinities between nodes.

    ``u`` is (..., N, d), ``W_u`` is (d, d') and ``a`` has length 2d'. The
    score for pair (i, j) is LeakyReLU(a . [W_u u_i || W_u u_j]).
    """
    d_att = W_u.shape[1]
    if a.shape != (2 * d_att,):
        raise ContractError(f"attention vector must have length {2 * d_att}, got {a.shape}")
    h = ad.matmul(u, W_u)
    src, dst = ad.split(ad.reshape(a, (2 * d_att, 1)), [d_att, d_att], axis=0)
    scores = ad.add(ad.matmul(h, src), ad.swap_last(ad.matmul(h, dst)))
    return ad.softmax(ad.leaky_relu(scores, slope))


def symmetrize_normalize(alpha: Tensor) -> tuple[Tensor, Tensor]:
    """Return (A_sym, D^-1/2 A_sym D^-1/2); zero-degree rows use degree 1."""
    sym = ad.scale(ad.add(alpha, ad.swap_last(alpha)), 0.5)
    deg = ad.sum_(sym, axis=-1)
    deg = ad.add(deg, (deg.data == 0.0).astype(np.float64))
    inv = ad.pow_scalar(deg, -0.5)
    n = alpha.shape[-1]
    lead = alpha.shape[:-2]
    rows = ad.reshape(inv, lead + (n, 1))
    cols = ad.reshape(inv, lead + (1, n))
    return sym, ad.mul(ad.mul(rows, sym), cols)


def blend_adjacency(prior: np.ndarray | Tensor | None, learned: Tensor, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"blend weight must lie in [0, 1], got {lam}")
    if prior is None:
        return learned
    prior = ad.as_tensor(prior)
    if prior.shape[-2:] != learned.shape[-2:]:
        raise ContractError(f"prior {prior.shape} and learned {learned.shape} adjacency differ")
    return ad.add(ad.scale(prior, lam), ad.scale(learned, 1.0 - lam))


@dataclass
class LearnedAdjacency:
    raw_attention: Tensor
    symmetric: Tensor
    normalized: Tensor
    blended: Tensor
    lam: float


def learn_adjacency(x: Tensor, W_u: Tensor, a: Tensor, prior, lam: float) -> LearnedAdjacency:
    alpha = adaptive_affinity(pool_node_embedding(x), W_u, a)
    sym, norm = symmetrize_normalize(alpha)
    return LearnedAdjacency(alpha, sym, norm, blend_adjacency(prior, norm, lam), lam)
