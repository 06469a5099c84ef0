"""Object-level and instance-level zero-shot segmentation, and one-shot
mask propagation through frame-to-frame affinity."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import STRIDE
from .loss_long_video import aggregate_global, pairwise_affinity
from .metrics import region_similarity
from .network import SegNet

_STRUCT = np.ones((3, 3), dtype=bool)


class LabelInputError(ValueError):
    pass


@contextlib.contextmanager
def evaluating(model: torch.nn.Module):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def model_frame_size(model: SegNet) -> int:
    return model.grid * STRIDE


def to_tensor(frames: np.ndarray, size: int | None = None) -> torch.Tensor:
    """``(T, H, W, 3)`` uint8 -> ``(T, 3, S, S)`` float in [0, 1]."""
    t = torch.as_tensor(np.asarray(frames)).float().div(255.0).permute(0, 3, 1, 2)
    if size is not None and tuple(t.shape[-2:]) != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t.contiguous()


def embed_frames(model: SegNet, frames: torch.Tensor, batch: int = 16) -> torch.Tensor:
    return torch.cat([model.phi(frames[i:i + batch]) for i in range(0, frames.shape[0], batch)])


def sample_references(num_frames: int, query: int, k: int, rng: np.random.Generator) -> list[int]:
    """``k - 1`` reference indices drawn from the other frames, with
    replacement only when the video is too short."""
    others = [i for i in range(num_frames) if i != query] or [query]
    replace = len(others) < k - 1
    return sorted(int(i) for i in rng.choice(others, size=k - 1, replace=replace))


def readout_probabilities(model: SegNet, feats: torch.Tensor, rng: np.random.Generator,
                          segments: int = 8) -> torch.Tensor:
    """Per-frame readout probabilities ``(T, h, w)`` from global-context features."""
    t = feats.shape[0]
    out = []
    for q in range(t):
        idx = [q] + sample_references(t, q, segments, rng)
        r = aggregate_global(feats[idx], 0)
        out.append(model.upsilon(r.unsqueeze(0))[0])
    return torch.stack(out)


def clean_mask(mask: np.ndarray) -> np.ndarray:
    m = np.pad(mask.astype(bool), 2, mode="edge")
    m = ndimage.binary_closing(ndimage.binary_opening(m, structure=_STRUCT), structure=_STRUCT)
    return m[2:-2, 2:-2]


def zvos_object(frames: np.ndarray, model: SegNet, seed: int = 0, segments: int = 8) -> np.ndarray:
    """Binary foreground masks ``(T, H, W)`` at the input resolution."""
    frames = np.asarray(frames)
    h, w = frames.shape[1:3]
    rng = np.random.default_rng(seed)
    with evaluating(model):
        x = to_tensor(frames, model_frame_size(model))
        probs = readout_probabilities(model, embed_frames(model, x), rng, segments)
        up = F.interpolate(probs.unsqueeze(1), size=(h, w), mode="bilinear", align_corners=False)[:, 0]
    return np.stack([clean_mask(p > 0.5) for p in up.numpy()]).astype(np.uint8)


# ----------------------------------------------------------- instance level

@dataclass
class InstanceTrack:
    id: int
    frames: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    boxes: list = field(default_factory=list)  # (x0, y0, x1, y1) inclusive-exclusive

    def __len__(self):
        return len(self.frames)


def proposals(mask: np.ndarray, min_area_frac: float = 0.001) -> list[np.ndarray]:
    """Connected components of a binary mask covering at least ``min_area_frac`` of the frame."""
    lab, n = ndimage.label(np.asarray(mask) > 0)
    min_area = min_area_frac * lab.size
    return [lab == i for i in range(1, n + 1) if (lab == i).sum() >= min_area]


def _box(m: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(m)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def link_candidates(masks, iou_threshold: float = 0.3, min_length: int = 3,
                    min_area_frac: float = 0.001) -> list[InstanceTrack]:
    """Greedy highest-IoU linking of per-frame components into tracks."""
    tracks: list[InstanceTrack] = []
    active: list[InstanceTrack] = []
    for t, mask in enumerate(masks):
        cands = proposals(mask, min_area_frac)
        pairs = sorted(((region_similarity(tr.masks[-1], c), i, j)
                        for i, tr in enumerate(active) for j, c in enumerate(cands)), reverse=True)
        used_t, used_c, nxt = set(), set(), []
        for iou, i, j in pairs:
            if iou < iou_threshold or i in used_t or j in used_c:
                continue
            used_t.add(i)
            used_c.add(j)
            tr = active[i]
            tr.frames.append(t)
            tr.masks.append(cands[j])
            tr.boxes.append(_box(cands[j]))
            nxt.append(tr)
        for j, c in enumerate(cands):
            if j not in used_c:
                tr = InstanceTrack(len(tracks) + 1, [t], [c], [_box(c)])
                tracks.append(tr)
                nxt.append(tr)
        active = nxt
    kept = [tr for tr in tracks if len(tr) >= min_length]
    for new_id, tr in enumerate(kept, start=1):
        tr.id = new_id
    return kept


def tracks_to_labels(tracks: list[InstanceTrack], num_frames: int, shape) -> np.ndarray:
    out = np.zeros((num_frames, *shape), dtype=np.uint8)
    for tr in tracks:
        for t, m in zip(tr.frames, tr.masks):
            out[t][m] = tr.id
    return out


def zvos_instance(frames: np.ndarray, model: SegNet, seed: int = 0, segments: int = 8,
                  iou_threshold: float = 0.3, min_length: int = 3) -> list[InstanceTrack]:
    masks = zvos_object(frames, model, seed, segments)
    return link_candidates(masks, iou_threshold, min_length)


# ------------------------------------------------------------- propagation

@dataclass
class LabelField:
    data: torch.Tensor  # (L, h, w); cells sum to 1
    labels: list        # instance id per channel, background first

    def assignment(self) -> torch.Tensor:
        return self.data.argmax(dim=0)

    def to_ids(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.uint8)[self.assignment().numpy()]

    def is_one_hot(self) -> bool:
        d = self.data
        return bool(((d == 0) | (d == 1)).all() and torch.allclose(d.sum(0), torch.ones_like(d[0])))


def label_field_from_mask(mask: np.ndarray, grid: tuple[int, int], labels=None) -> LabelField:
    """One-hot field at feature resolution by per-cell majority vote."""
    mask = np.asarray(mask)
    labels = sorted({0, *(int(v) for v in np.unique(mask))}) if labels is None else list(labels)
    gh, gw = grid
    onehot = torch.stack([torch.as_tensor(mask == lab, dtype=torch.float32) for lab in labels])
    area = F.adaptive_avg_pool2d(onehot.unsqueeze(0), (gh, gw))[0]
    idx = area.argmax(dim=0)
    return LabelField(F.one_hot(idx, len(labels)).permute(2, 0, 1).float(), labels)


def propagate_step(affinity: torch.Tensor, labels: torch.Tensor):
    """``v_m = sum_n A(n, m) y_n``; returns (distribution, one-hot assignment).

    ``labels`` is ``(L, h, w)`` for the previous frame, ``affinity`` is
    ``(h*w, h*w)`` with rows on the previous frame.
    """
    l, h, w = labels.shape
    v = labels.reshape(l, h * w).to(affinity.dtype) @ affinity
    hard = F.one_hot(v.argmax(dim=0), l).transpose(0, 1).to(labels.dtype)
    return v.reshape(l, h, w), hard.reshape(l, h, w)


def ovos_propagate(frames: np.ndarray, first: LabelField | np.ndarray, model: SegNet,
                   affinity_fn: Callable | None = None, return_distributions: bool = False):
    """Propagate first-frame labels through ``t-1 -> t`` affinities.

    Returns one :class:`LabelField` per frame (the first is the input field),
    and optionally the pre-assignment distributions for frames 2..T.
    """
    affinity_fn = affinity_fn or pairwise_affinity
    with evaluating(model):
        x = to_tensor(frames, model_frame_size(model))
        feats = embed_frames(model, x)
        gh, gw = feats.shape[-2:]
        if not isinstance(first, LabelField):
            first = label_field_from_mask(first, (gh, gw))
        if not first.is_one_hot():
            raise LabelInputError("first-frame labels must be one-hot per cell")
        if first.data.shape[0] < 2:
            raise LabelInputError("need at least two classes including background")
        fields = [first]
        dists = []
        y = first.data
        for t in range(1, feats.shape[0]):
            a = affinity_fn(feats[t - 1], feats[t])
            v, y = propagate_step(a, y)
            dists.append(v)
            fields.append(LabelField(y, first.labels))
    return (fields, dists) if return_distributions else fields


def fields_to_masks(fields: list[LabelField], size: tuple[int, int]) -> np.ndarray:
    """Indexed masks ``(T, H, W)`` by nearest-neighbour upsampling of the assignments."""
    h, w = size
    out = []
    for f in fields:
        ids = torch.as_tensor(f.to_ids()).float()[None, None]
        out.append(F.interpolate(ids, size=(h, w), mode="nearest")[0, 0].numpy().astype(np.uint8))
    return np.stack(out)
