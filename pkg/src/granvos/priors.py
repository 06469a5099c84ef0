"""Unsupervised fore-background prior from a border-contrast saliency heuristic."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

_STRUCT = np.ones((3, 3), dtype=bool)


def border_band_width(h: int, w: int) -> int:
    return max(1, min(h, w) // 16)


def compute_saliency(frame: np.ndarray) -> np.ndarray:
    """Min-max normalized color distance to the mean border color.

    ``frame`` is ``(H, W, 3)``, uint8 or float in [0, 1]. The border band is
    one cell of a 16x16 partition of the frame. Returns float64 ``(H, W)`` in
    [0, 1]; a frame with no contrast yields all zeros.
    """
    img = np.asarray(frame)
    if img.ndim != 3 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"frame must be (H>=8, W>=8, 3), got {img.shape}")
    img = img.astype(np.float64)
    if np.asarray(frame).dtype == np.uint8:
        img /= 255.0
    h, w = img.shape[:2]
    b = border_band_width(h, w)
    band = np.ones((h, w), dtype=bool)
    band[b:h - b, b:w - b] = False
    mean_color = img[band].mean(axis=0)
    dist = np.sqrt(((img - mean_color) ** 2).sum(axis=-1))
    # median keeps region interiors at full contrast where a box filter would erode them
    dist = ndimage.median_filter(dist, size=3, mode="nearest")
    lo, hi = dist.min(), dist.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w))
    return (dist - lo) / (hi - lo)


def binarize(saliency: np.ndarray) -> np.ndarray:
    """Otsu threshold, then 3x3 opening and closing. Returns uint8 in {0, 1}."""
    s = np.asarray(saliency, dtype=np.float64)
    if s.max() - s.min() < 1e-12:
        return np.zeros(s.shape, dtype=np.uint8)
    mask = np.pad(s > threshold_otsu(s), 2, mode="edge")
    mask = ndimage.binary_opening(mask, structure=_STRUCT)
    mask = ndimage.binary_closing(mask, structure=_STRUCT)
    return mask[2:-2, 2:-2].astype(np.uint8)


def prior_mask(frame: np.ndarray) -> np.ndarray:
    return binarize(compute_saliency(frame))
