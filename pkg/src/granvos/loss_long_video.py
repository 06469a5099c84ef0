"""Long-term semantic matching loss, global aggregation, and the
video-level instance discrimination loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import DimensionError, column_softmax, flatten_features, grid_coords
from .network import TransformParams, apply_transform

EPS = 1e-6


class ConfigError(ValueError):
    pass


def pairwise_affinity(x_i: torch.Tensor, x_j: torch.Tensor, scale: float | None = None) -> torch.Tensor:
    """Column-stochastic co-attention between two feature maps.

    Rows index positions of ``x_i``, columns positions of ``x_j``; default
    logit scale is ``1/sqrt(C)``. Accepts ``(C, H, W)`` or batched inputs.
    """
    if x_i.shape != x_j.shape:
        raise DimensionError(f"feature shapes differ: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    c = x_i.shape[-3]
    scale = 1.0 / math.sqrt(c) if scale is None else scale
    fi, fj = flatten_features(x_i), flatten_features(x_j)
    return column_softmax(fi.transpose(-1, -2) @ fj * scale)


def _grid_center(h: int, w: int) -> tuple[float, float]:
    return ((w - 1) / 2.0, (h - 1) / 2.0)


def transform_sq_distances(h: int, w: int, tau: TransformParams, dtype=torch.float32) -> torch.Tensor:
    """``D[m, o] = ||coord(m) - tau(coord(o))||^2`` over a ``h x w`` grid."""
    pts = grid_coords(h, w, dtype=dtype)
    mapped = apply_transform(tau, pts, center=_grid_center(h, w)).to(dtype)
    return ((pts[:, None, :] - mapped[None, :, :]) ** 2).sum(-1)


def consistency_mask(h: int, w: int, tau: TransformParams, dtype=torch.float32) -> torch.Tensor:
    """Binary indicator matrix: 1 where ``coord(m)`` lies within 1 of ``tau(coord(o))``."""
    with torch.no_grad():
        d2 = transform_sq_distances(h, w, tau.detach(), dtype=torch.float64)
    return (d2 <= 1.0 + 1e-9).to(dtype)


def geometric_consistency(m, o, tau: TransformParams, center=(0.0, 0.0)) -> int:
    mapped = apply_transform(tau, o, center=center)
    d = torch.linalg.norm(torch.as_tensor(m, dtype=mapped.dtype) - mapped)
    return int(d.item() <= 1.0 + 1e-9)


@dataclass
class MatchPair:
    frame_i: int
    frame_j: int
    affinity_ij: torch.Tensor
    affinity_ji: torch.Tensor
    tau_ij: TransformParams
    tau_ji: TransformParams
    grid: tuple[int, int]  # (h, w)

    def __post_init__(self):
        if abs(self.frame_i - self.frame_j) < 6:
            raise ValueError("long-term pairs need |i - j| >= 6")


def _directional_mass(a: torch.Tensor, tau: TransformParams, h: int, w: int) -> torch.Tensor:
    return (a * consistency_mask(h, w, tau, dtype=a.dtype)).sum()


def long_term_loss(pair: MatchPair) -> torch.Tensor:
    """Negative affinity mass on geometrically consistent position pairs, both directions."""
    h, w = pair.grid
    return -(_directional_mass(pair.affinity_ij, pair.tau_ij, h, w)
             + _directional_mass(pair.affinity_ji, pair.tau_ji, h, w))


def long_term_surrogate(pair: MatchPair) -> torch.Tensor:
    """Smooth stand-in giving the transform regressor a gradient.

    Uses ``exp(-d^2/2)`` in place of the binary indicator and a detached
    affinity, so only the regressor's parameters receive gradient.
    """
    h, w = pair.grid
    total = 0.0
    for a, tau in ((pair.affinity_ij, pair.tau_ij), (pair.affinity_ji, pair.tau_ji)):
        d2 = transform_sq_distances(h, w, tau, dtype=a.dtype)
        total = total + (a.detach() * torch.exp(-0.5 * d2)).sum()
    return -total


@dataclass
class VideoAbstract:
    query_frames: list
    features: torch.Tensor            # (K, C, h, w)
    augmented: torch.Tensor | None = None  # (K, 2C, h, w)

    @property
    def segment_count(self) -> int:
        return len(self.query_frames)


def segment_bounds(num_frames: int, k: int) -> list[tuple[int, int]]:
    """Split ``range(num_frames)`` into ``k`` near-equal contiguous segments."""
    edges = [round(i * num_frames / k) for i in range(k + 1)]
    return [(edges[i], max(edges[i + 1], edges[i] + 1)) for i in range(k)]


def aggregate_global(features: torch.Tensor, k: int, scale: float | None = None) -> torch.Tensor:
    """Global-information augmented map ``[x', x]`` for segment ``k``.

    ``features`` is ``(K, C, h, w)``. The query attends over all positions of
    the other ``K-1`` frames; each query column of the affinity is a
    distribution over reference positions.
    """
    n, c, h, w = features.shape
    if n < 2:
        raise ConfigError("global aggregation needs at least two segments")
    scale = 1.0 / math.sqrt(c) if scale is None else scale
    q = features[k].reshape(c, h * w)
    refs = torch.cat([features[i].reshape(c, h * w) for i in range(n) if i != k], dim=1)
    a = column_softmax(refs.transpose(0, 1) @ q * scale)
    x_prime = (refs @ a).reshape(c, h, w)
    return torch.cat([x_prime, features[k]], dim=0)


def aggregate_all(features: torch.Tensor, scale: float | None = None) -> torch.Tensor:
    return torch.stack([aggregate_global(features, k, scale) for k in range(features.shape[0])])


def pooled_embedding(r: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the spatial dims."""
    return r.mean(dim=(-2, -1))


def bank_embedding(x: torch.Tensor) -> torch.Tensor:
    """Instance frames carry no video context, so ``r = [x, x]`` before pooling."""
    return pooled_embedding(torch.cat([x, x], dim=-3))


@dataclass
class InstanceBank:
    embeddings: torch.Tensor  # (N, 2C)
    frames: list | None = None

    def __len__(self):
        return self.embeddings.shape[0]


def instance_probabilities(query: torch.Tensor, bank: InstanceBank | torch.Tensor,
                           temperature: float = 0.1) -> torch.Tensor:
    """Softmax over bank instances of cosine similarity / temperature.

    ``query`` is ``(2C,)`` or ``(Nq, 2C)``; returns matching leading shape
    with a trailing ``N`` axis.
    """
    emb = bank.embeddings if isinstance(bank, InstanceBank) else bank
    if emb.shape[0] < 1:
        raise ConfigError("instance bank is empty")
    logits = F.normalize(query, dim=-1) @ F.normalize(emb, dim=-1).transpose(0, 1) / temperature
    return torch.softmax(logits, dim=-1)


def global_loss(queries: torch.Tensor, bank: InstanceBank | torch.Tensor,
                temperature: float = 0.1) -> torch.Tensor:
    """Joint negative log-likelihood: each query picks its own instance and
    rejects every other one. ``queries[n]`` belongs to video ``n``."""
    p = instance_probabilities(queries, bank, temperature).clamp(EPS, 1 - EPS)
    n = p.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    return -(p[eye].log().sum() + (1 - p[~eye]).log().sum())
