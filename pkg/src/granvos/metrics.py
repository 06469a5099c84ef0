"""DAVIS-style region similarity J and boundary accuracy F, with per-video
mean / recall / decay aggregation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .core import DimensionError
from .dataio import _images_in, read_mask


def _check(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred, gt = _check(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def mask_boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background; the frame edge
    does not count as background."""
    m = np.asarray(mask).astype(bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=1)
    return m & ~inner


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= radius * radius


def boundary_accuracy(pred, gt, tolerance_px: int = 2) -> float:
    """Boundary F-measure with matches counted inside a disk of ``tolerance_px``."""
    pred, gt = _check(pred, gt)
    pb, gb = mask_boundary(pred), mask_boundary(gt)
    n_p, n_g = pb.sum(), gb.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    fp = disk(tolerance_px)
    gt_dil = ndimage.binary_dilation(gb, structure=fp)
    pred_dil = ndimage.binary_dilation(pb, structure=fp)
    precision = (pb & gt_dil).sum() / n_p
    recall = (gb & pred_dil).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def recall(scores, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=float)
    return float((s > threshold).mean()) if s.size else float("nan")


def decay(scores) -> float:
    """Mean of the first quarter of frames minus mean of the last quarter."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        return float("nan")
    bins = np.array_split(s, 4)
    bins = [b for b in bins if b.size] or [s]
    return float(bins[0].mean() - bins[-1].mean())


@dataclass
class VideoScores:
    video: str
    frames: list            # frame indices actually scored
    J: list                 # per-frame, averaged over instances
    F: list
    J_objects: list = field(default_factory=list)  # per-instance per-frame lists
    F_objects: list = field(default_factory=list)

    def summary(self) -> dict:
        jo = self.J_objects or [self.J]
        fo = self.F_objects or [self.F]
        return dict(
            J_mean=float(np.mean([np.mean(j) for j in jo])) if self.J else float("nan"),
            J_recall=float(np.mean([recall(j) for j in jo])) if self.J else float("nan"),
            J_decay=float(np.mean([decay(j) for j in jo])) if self.J else float("nan"),
            F_mean=float(np.mean([np.mean(f) for f in fo])) if self.F else float("nan"),
            F_recall=float(np.mean([recall(f) for f in fo])) if self.F else float("nan"),
            F_decay=float(np.mean([decay(f) for f in fo])) if self.F else float("nan"),
        )


@dataclass
class EvalReport:
    mode: str
    videos: list
    missing: list = field(default_factory=list)  # (video, frame file name)

    @property
    def ok(self) -> bool:
        return not self.missing

    def dataset_means(self) -> dict:
        rows = [v.summary() for v in self.videos if v.J]
        keys = ("J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay")
        if not rows:
            return {k: float("nan") for k in keys}
        return {k: float(np.mean([r[k] for r in rows])) for k in keys}

    def table(self) -> str:
        keys = ("J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay")
        width = max([len("dataset")] + [len(v.video) for v in self.videos])
        lines = [f"{'video':<{width}}  " + "  ".join(f"{k:>8}" for k in keys)]
        for v in self.videos:
            s = v.summary()
            lines.append(f"{v.video:<{width}}  " + "  ".join(f"{s[k]:8.4f}" for k in keys))
        d = self.dataset_means()
        lines.append(f"{'dataset':<{width}}  " + "  ".join(f"{d[k]:8.4f}" for k in keys))
        if self.missing:
            lines.append(f"missing frames: {len(self.missing)}")
            lines.extend(f"  {vid}/{name}" for vid, name in self.missing)
        return "\n".join(lines)

    def write(self, path) -> None:
        """Delimited text: one row per video plus a ``dataset`` row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = ("J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video", *keys])
            for v in self.videos:
                s = v.summary()
                w.writerow([v.video, *(f"{s[k]:.6f}" for k in keys)])
            d = self.dataset_means()
            w.writerow(["dataset", *(f"{d[k]:.6f}" for k in keys)])
            for vid, name in self.missing:
                w.writerow(["missing", f"{vid}/{name}"])


def match_instances(pred, gt) -> dict:
    """Map each gt instance id to the pred id maximizing total IoU (0 if unmatched)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    gids = [int(g) for g in np.unique(gt) if g != 0]
    pids = [int(p) for p in np.unique(pred) if p != 0]
    mapping = {g: 0 for g in gids}
    if not gids or not pids:
        return mapping
    iou = np.array([[region_similarity(pred == p, gt == g) for p in pids] for g in gids])
    rows, cols = linear_sum_assignment(-iou)
    for r, c in zip(rows, cols):
        if iou[r, c] > 0:
            mapping[gids[r]] = pids[c]
    return mapping


def evaluate_video(preds, gts, mode: str = "object", video: str = "video",
                   frames=None, tolerance_px: int = 2) -> VideoScores:
    """Score aligned lists of predicted and ground-truth label masks."""
    frames = list(range(len(gts))) if frames is None else list(frames)
    if mode == "object":
        js = [region_similarity(p > 0, g > 0) for p, g in zip(preds, gts)]
        fs = [boundary_accuracy(p > 0, g > 0, tolerance_px) for p, g in zip(preds, gts)]
        return VideoScores(video, frames, js, fs)
    if mode != "instance":
        raise ValueError(f"unknown mode {mode!r}")
    if not gts:
        return VideoScores(video, frames, [], [])
    mapping = match_instances(preds[0], gts[0])
    jo, fo = [], []
    for g, p in mapping.items():
        jo.append([region_similarity(pp == p if p else np.zeros_like(pp, bool), gg == g) for pp, gg in zip(preds, gts)])
        fo.append([boundary_accuracy(pp == p if p else np.zeros_like(pp, bool), gg == g, tolerance_px)
                   for pp, gg in zip(preds, gts)])
    if not jo:
        js = [region_similarity(p > 0, g > 0) for p, g in zip(preds, gts)]
        fs = [boundary_accuracy(p > 0, g > 0, tolerance_px) for p, g in zip(preds, gts)]
        return VideoScores(video, frames, js, fs)
    return VideoScores(video, frames, list(np.mean(jo, axis=0)), list(np.mean(fo, axis=0)), jo, fo)


def _mask_files(video_dir: Path) -> list[Path]:
    return _images_in(video_dir / "masks") or _images_in(video_dir)


def _video_dirs(root: Path) -> dict:
    if _images_in(root):
        return {root.name: root}
    return {p.name: p for p in sorted(root.iterdir()) if p.is_dir()}


def evaluate(pred_dir, gt_dir, mode: str = "object", skip_first: bool = False,
             tolerance_px: int = 2) -> EvalReport:
    """Evaluate every gt video that has a prediction directory.

    Both roots hold ``<video_id>/`` subdirectories (optionally with a
    ``masks/`` level); a root that directly holds mask files is a single video.
    Gt frames absent from the predictions are recorded in ``missing``.
    """
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    gt_videos = _video_dirs(gt_root)
    pred_videos = _video_dirs(pred_root)
    if len(gt_videos) == 1 and len(pred_videos) == 1:
        pred_videos = {next(iter(gt_videos)): next(iter(pred_videos.values()))}
    report = EvalReport(mode, [])
    for vid, gdir in gt_videos.items():
        gt_files = _mask_files(gdir)
        if vid not in pred_videos:
            report.missing.extend((vid, f.name) for f in gt_files)
            continue
        pred_by_name = {f.stem: f for f in _mask_files(pred_videos[vid])}
        preds, gts, idx = [], [], []
        for i, gf in enumerate(gt_files):
            if skip_first and i == 0:
                continue
            pf = pred_by_name.get(gf.stem)
            if pf is None:
                report.missing.append((vid, gf.name))
                continue
            g = read_mask(gf)
            p = read_mask(pf)
            if p.shape != g.shape:
                p = np.array(Image.fromarray(p).resize((g.shape[1], g.shape[0]), Image.NEAREST), dtype=np.uint8)
            preds.append(p)
            gts.append(g)
            idx.append(i)
        report.videos.append(evaluate_video(preds, gts, mode, vid, idx, tolerance_px))
    return report
