"""Shared tensor conventions and numeric primitives.

Conventions used throughout the package:

* A feature map is a tensor of shape ``(C, H, W)`` (or ``(B, C, H, W)``),
  sitting at 1/``stride`` of the source frame resolution.
* A 2-D point is ``(x, y)`` = (column, row) in feature-grid units.
* An affinity matrix has rows indexing reference positions and columns
  indexing query positions; every column is a distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

STRIDE = 4


class DimensionError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


@dataclass
class GaussianTarget:
    data: torch.Tensor  # (H, W)
    center: tuple[float, float]
    sigma: float


def _as_batched(t: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if t.dim() == ndim - 1:
        return t.unsqueeze(0), True
    if t.dim() != ndim:
        raise DimensionError(f"expected {ndim - 1} or {ndim} dims, got shape {tuple(t.shape)}")
    return t, False


def anchor_offset(kernel_h: int, kernel_w: int) -> tuple[int, int]:
    """Cell offset ``(dx, dy)`` from a kernel's top-left to the response cell
    where a perfectly aligned match peaks under same-padding correlation."""
    return (kernel_w - 1) // 2, (kernel_h - 1) // 2


def correlation_scores(kernel: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Raw same-padded correlation, normalized by kernel area times channels.

    ``kernel`` is ``(C, kh, kw)`` or ``(B, C, kh, kw)``; ``search`` is
    ``(C, H, W)`` or ``(B, C, H, W)``. Each batch element is correlated with
    its own kernel. Returns ``(H, W)`` or ``(B, H, W)``.
    """
    k, squeeze = _as_batched(kernel, 4)
    s, _ = _as_batched(search, 4)
    if k.shape[0] != s.shape[0]:
        raise DimensionError(f"batch mismatch: kernel {k.shape[0]} vs search {s.shape[0]}")
    b, c, kh, kw = k.shape
    if s.shape[1] != c:
        raise DimensionError(f"channel mismatch: kernel has {c}, search has {s.shape[1]}")
    h, w = s.shape[-2:]
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than search {h}x{w}")
    left, top = anchor_offset(kh, kw)
    padded = F.pad(s, (left, kw - 1 - left, top, kh - 1 - top))
    out = F.conv2d(padded.reshape(1, b * c, h + kh - 1, w + kw - 1), k, groups=b)
    out = out.reshape(b, h, w) / (kh * kw * c)
    return out[0] if squeeze else out


def cross_correlate(kernel: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
    """Logistic-normalized response map with the spatial extent of ``search``."""
    return torch.sigmoid(correlation_scores(kernel, search))


def column_softmax(scores: torch.Tensor) -> torch.Tensor:
    """Softmax over dim -2, so each column of the last two dims sums to one."""
    if not torch.isfinite(scores).all():
        raise NumericDomainError("scores contain NaN or Inf")
    shifted = scores - scores.max(dim=-2, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-2, keepdim=True)


def gaussian_target(center: tuple[float, float], patch_size: float, grid: tuple[int, int],
                    dtype: torch.dtype = torch.float32) -> GaussianTarget:
    """Peak-normalized Gaussian on a ``(W, H)`` grid, sigma = 0.1 * patch_size.

    ``center`` and ``patch_size`` are in grid units.
    """
    w, h = grid
    cx, cy = center
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        raise ValueError(f"center {center} outside grid {grid}")
    if patch_size <= 0:
        raise ValueError("patch_size must be positive")
    sigma = 0.1 * patch_size
    xs = torch.arange(w, dtype=torch.float64)
    ys = torch.arange(h, dtype=torch.float64)
    gx = torch.exp(-0.5 * ((xs - cx) / sigma) ** 2)
    gy = torch.exp(-0.5 * ((ys - cy) / sigma) ** 2)
    data = (gy[:, None] * gx[None, :]).to(dtype)
    return GaussianTarget(data=data, center=(float(cx), float(cy)), sigma=sigma)


def gaussian_value(point: tuple[float, float], target: GaussianTarget) -> float:
    """Analytic value of ``target`` at an arbitrary (possibly fractional) point."""
    dx = point[0] - target.center[0]
    dy = point[1] - target.center[1]
    return math.exp(-0.5 * (dx * dx + dy * dy) / target.sigma ** 2)


def grid_coords(h: int, w: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(H*W, 2)`` tensor of ``(x, y)`` coordinates in row-major order."""
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


def flatten_features(x: torch.Tensor) -> torch.Tensor:
    """``(C, H, W)`` -> ``(C, H*W)``; batched inputs keep their leading dim."""
    return x.reshape(*x.shape[:-2], -1)


def check_feature_map(x: torch.Tensor) -> None:
    if x.dim() != 3 or min(x.shape) < 1:
        raise DimensionError(f"feature map must be (C, H, W), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NumericDomainError("feature map has non-finite entries")
