"""Frame-level fore-background loss (plain and bootstrapped) and the
forward-backward patch tracking loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .core import STRIDE, DimensionError, anchor_offset, cross_correlate, gaussian_target

EPS = 1e-6


class BootstrapStateError(RuntimeError):
    pass


def downsample_mask(mask, stride: int = STRIDE) -> torch.Tensor:
    """Nearest-neighbour downsampling that samples each cell at its center pixel."""
    m = torch.as_tensor(np.asarray(mask))
    off = stride // 2
    return m[..., off::stride, off::stride].float()


def bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if p.shape != target.shape:
        raise DimensionError(f"prediction {tuple(p.shape)} vs target {tuple(target.shape)}")
    p = p.clamp(EPS, 1 - EPS)
    target = target.to(p.dtype)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def frame_loss(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of foreground probabilities against a prior mask."""
    return bce(p, q)


def bootstrap_target(q: torch.Tensor, p_bar: torch.Tensor, alpha: float) -> torch.Tensor:
    return alpha * q.float() + (1 - alpha) * p_bar.float()


def bootstrap_frame_loss(p_new: torch.Tensor, q: torch.Tensor, p_bar: torch.Tensor | None,
                         alpha: float = 0.05) -> torch.Tensor:
    """Cross-entropy against the convex target ``alpha*Q + (1-alpha)*P_bar``.

    Returned as a quantity to minimize (the negated log-likelihood).
    """
    if p_bar is None:
        raise BootstrapStateError("no previous prediction available for bootstrapping")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return bce(p_new, bootstrap_target(q, p_bar, alpha).to(p_new.dtype))


@dataclass
class BootstrapState:
    alpha: float = 0.05
    iteration: int = 1
    previous: dict = field(default_factory=dict)  # (video_id, frame_idx) -> {0,1} grid

    def lookup(self, key) -> torch.Tensor:
        if key not in self.previous:
            raise BootstrapStateError(f"no stored prediction for {key!r}")
        return self.previous[key]


def track_step(patch_feat: torch.Tensor, frame_feat: torch.Tensor):
    """Correlate a patch embedding on a frame embedding.

    Returns the response and the peak cell ``(x, y)``; ties resolve to the
    first maximum in row-major order. Batched inputs give ``(B, 2)`` peaks.
    """
    resp = cross_correlate(patch_feat, frame_feat)
    flat = resp.detach().reshape(*resp.shape[:-2], -1)
    idx = flat.argmax(dim=-1)
    w = resp.shape[-1]
    peak = torch.stack([idx % w, idx // w], dim=-1)
    return resp, peak


@dataclass
class PatchTrack:
    start_rect: torch.Tensor          # (B, 2) top-left pixel (x, y)
    forward_path: list                # peaks on frames 2 and 3, each (B, 2)
    backward_path: list               # peaks on frames 2 and 1
    backward_response: torch.Tensor   # (B, h, w)
    target: torch.Tensor              # (B, h, w)
    centers: torch.Tensor             # (B, 2) target center in cells


def crop_patches(frames: torch.Tensor, rects: torch.Tensor, size: int) -> torch.Tensor:
    return torch.stack([f[:, y:y + size, x:x + size] for f, (x, y) in zip(frames, rects.tolist())])


def _rect_from_peak(peak: torch.Tensor, k: int, size: int, frame_h: int, frame_w: int) -> torch.Tensor:
    ax, ay = anchor_offset(k, k)
    x = (peak[:, 0] - ax) * STRIDE
    y = (peak[:, 1] - ay) * STRIDE
    return torch.stack([x.clamp(0, frame_w - size), y.clamp(0, frame_h - size)], dim=1)


def forward_backward(phi: Callable[[torch.Tensor], torch.Tensor], frames: torch.Tensor, rects,
                     patch_size: int, frame_feats: torch.Tensor | None = None) -> PatchTrack:
    """Track patches 1 -> 2 -> 3 and back 3 -> 2 -> 1, re-cropping after each hop.

    ``frames`` is ``(B, 3, 3, H, W)`` (or ``(3, 3, H, W)``); ``rects`` holds one
    ``(x, y)`` top-left pixel per clip for a ``patch_size`` square in frame 1.
    ``frame_feats``, if given, are the precomputed ``(B, 3, C, h, w)`` frame
    embeddings.
    """
    if frames.dim() == 4:
        frames = frames.unsqueeze(0)
        if frame_feats is not None and frame_feats.dim() == 4:
            frame_feats = frame_feats.unsqueeze(0)
    b, t, _, fh, fw = frames.shape
    if t != 3:
        raise DimensionError(f"expected 3 tracked frames, got {t}")
    rects = torch.as_tensor(rects, dtype=torch.long).reshape(b, 2)
    if ((rects < 0) | (rects[:, 0] + patch_size > fw)[:, None] | (rects[:, 1] + patch_size > fh)[:, None]).any():
        raise ValueError("patch rectangle falls outside the frame")
    if frame_feats is None:
        frame_feats = torch.stack([phi(frames[:, i]) for i in range(3)], dim=1)
    k = patch_size // STRIDE
    ax, ay = anchor_offset(k, k)

    kern = phi(crop_patches(frames[:, 0], rects, patch_size))
    forward_path, backward_path = [], []
    for i in (1, 2):
        _, peak = track_step(kern, frame_feats[:, i])
        forward_path.append(peak)
        kern = phi(crop_patches(frames[:, i], _rect_from_peak(peak, k, patch_size, fh, fw), patch_size))
    _, peak = track_step(kern, frame_feats[:, 1])
    backward_path.append(peak)
    kern = phi(crop_patches(frames[:, 1], _rect_from_peak(peak, k, patch_size, fh, fw), patch_size))
    resp, peak = track_step(kern, frame_feats[:, 0])
    backward_path.append(peak)

    gh, gw = resp.shape[-2:]
    centers = torch.stack([rects[:, 0].double() / STRIDE + ax, rects[:, 1].double() / STRIDE + ay], dim=1)
    target = torch.stack([
        gaussian_target((cx, cy), k, (gw, gh), dtype=resp.dtype).data for cx, cy in centers.tolist()
    ])
    return PatchTrack(rects, forward_path, backward_path, resp, target, centers)


def short_term_loss(track: PatchTrack) -> torch.Tensor:
    """Mean squared error between backward response and the Gaussian target."""
    return ((track.backward_response - track.target) ** 2).mean()
