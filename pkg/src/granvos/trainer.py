"""Batch sampling, the weighted multi-granularity objective, and the
bootstrapped outer training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from .core import STRIDE
from .dataio import VideoDataset
from .inference import embed_frames, evaluating, readout_probabilities, to_tensor
from .loss_frame_short import (BootstrapState, bce, bootstrap_target, downsample_mask, forward_backward,
                               short_term_loss)
from .loss_long_video import (ConfigError, InstanceBank, MatchPair, aggregate_all, bank_embedding, global_loss,
                              long_term_loss, long_term_surrogate, pairwise_affinity, pooled_embedding,
                              segment_bounds)
from .network import BackboneConfig, SegNet
from .priors import prior_mask

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "iter", "L_frame", "L_short", "L_long", "L_global", "L_readout", "total")


@dataclass
class TrainConfig:
    batch_videos: int = 16
    frame_size: int = 256
    clip_len: int = 6
    tracked_frames: int = 3
    patch_size: int = 64
    min_pair_gap: int = 6
    segments: int = 8
    beta1: float = 0.1
    beta2: float = 0.02
    beta3: float = 0.5
    alpha: float = 0.05
    bootstrap_iterations: int = 2
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps_per_iteration: int = 1000
    temperature: float = 0.1
    channels: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3", "alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha > 1:
            raise ValueError("alpha must be <= 1")
        if self.clip_len < self.tracked_frames:
            raise ValueError("clip_len must be >= tracked_frames")
        if self.tracked_frames != 3:
            raise ValueError("the tracking schedule uses exactly 3 frames")
        if self.frame_size % STRIDE or self.patch_size % STRIDE or self.patch_size > self.frame_size:
            raise ValueError("frame_size and patch_size must be multiples of 4 with patch <= frame")

    @property
    def grid(self) -> int:
        return self.frame_size // STRIDE


def desk_config(**overrides) -> TrainConfig:
    """Small defaults for 64x64 synthetic video on a CPU."""
    base = dict(batch_videos=4, frame_size=64, patch_size=32, steps_per_iteration=300)
    base.update(overrides)
    return TrainConfig(**base)


def load_config(path) -> TrainConfig:
    """Read a flat YAML/JSON mapping whose keys are TrainConfig field names."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a flat mapping")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(**data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(asdict(cfg), sort_keys=False))


# ------------------------------------------------------------------ batches

@dataclass
class VideoSample:
    video: int
    tracked: list       # 3 ascending frame indices inside one clip
    patch_xy: tuple     # top-left pixel of the patch in tracked[0]
    pair: tuple         # (i, j), |i - j| >= min_pair_gap, random order
    abstract: list      # one frame per segment
    query_k: int        # segment used as the instance-discrimination query
    instance: int

    def describe(self) -> str:
        return (f"video={self.video} tracked={self.tracked} patch={self.patch_xy} pair={self.pair} "
                f"abstract={self.abstract} k={self.query_k} instance={self.instance}")


@dataclass
class TrainBatch:
    samples: list

    def describe(self) -> str:
        return "; ".join(s.describe() for s in self.samples)


def _eligible(dataset: VideoDataset, cfg: TrainConfig) -> list[int]:
    need = max(cfg.clip_len, cfg.min_pair_gap + 1, cfg.segments)
    ok = []
    for i, rec in enumerate(dataset.videos):
        if len(rec) < need:
            log.warning("skipping video %s: %d frames < %d", rec.id, len(rec), need)
        else:
            ok.append(i)
    return ok


def sample_batch(dataset: VideoDataset, cfg: TrainConfig, rng: np.random.Generator,
                 eligible: list[int] | None = None) -> TrainBatch:
    eligible = _eligible(dataset, cfg) if eligible is None else eligible
    if len(eligible) < cfg.batch_videos:
        raise ConfigError(f"need {cfg.batch_videos} eligible videos, have {len(eligible)}")
    chosen = rng.choice(eligible, size=cfg.batch_videos, replace=False)
    samples = []
    span = cfg.frame_size - cfg.patch_size
    for v in chosen:
        t = len(dataset.videos[int(v)])
        start = int(rng.integers(0, t - cfg.clip_len + 1))
        tracked = sorted(int(i) for i in start + rng.choice(cfg.clip_len, size=cfg.tracked_frames, replace=False))
        px = int(rng.integers(0, span // STRIDE + 1)) * STRIDE
        py = int(rng.integers(0, span // STRIDE + 1)) * STRIDE
        while True:
            i, j = (int(a) for a in rng.integers(0, t, size=2))
            if abs(i - j) >= cfg.min_pair_gap:
                break
        abstract = [int(rng.integers(lo, hi)) for lo, hi in segment_bounds(t, cfg.segments)]
        samples.append(VideoSample(int(v), tracked, (px, py), (i, j), abstract,
                                   int(rng.integers(cfg.segments)), int(rng.integers(t))))
    return TrainBatch(samples)


# ------------------------------------------------------------------ objective

@dataclass
class LossBreakdown:
    frame: torch.Tensor
    short: torch.Tensor
    long: torch.Tensor
    global_: torch.Tensor
    readout: torch.Tensor
    kappa_surrogate: torch.Tensor
    betas: tuple

    @property
    def total(self) -> torch.Tensor:
        b1, b2, b3 = self.betas
        return self.frame + b1 * self.short + b2 * self.long + b3 * self.global_

    def objective(self) -> torch.Tensor:
        """What gets minimized: the weighted total, the readout term, and a
        zero-valued term routing the smooth matching gradient to kappa."""
        b2 = self.betas[1]
        return self.total + self.readout + b2 * (self.kappa_surrogate - self.kappa_surrogate.detach())

    def row(self) -> dict:
        vals = dict(L_frame=self.frame, L_short=self.short, L_long=self.long, L_global=self.global_,
                    L_readout=self.readout, total=self.total)
        return {k: float(torch.as_tensor(v).detach()) for k, v in vals.items()}


def combine_terms(frame, short, long, global_, betas=(0.1, 0.02, 0.5)) -> float:
    b1, b2, b3 = betas
    return frame + b1 * short + b2 * long + b3 * global_


@dataclass
class VideoTensors:
    frames: torch.Tensor   # (T, 3, S, S)
    priors: torch.Tensor   # (T, h, w) binary


def prepare_data(dataset: VideoDataset, cfg: TrainConfig) -> list[VideoTensors]:
    out = []
    for i in range(len(dataset)):
        raw = dataset.frames(i)
        frames = to_tensor(raw, cfg.frame_size)
        pix = (frames.permute(0, 2, 3, 1).numpy() * 255).round().astype(np.uint8)
        q = torch.stack([downsample_mask(prior_mask(f)) for f in pix])
        out.append(VideoTensors(frames, q))
    return out


def frame_targets(data: list[VideoTensors], state: BootstrapState, video: int, idx) -> torch.Tensor:
    q = data[video].priors[idx]
    if state.iteration <= 1:
        return q
    p_bar = torch.stack([state.lookup((video, int(t))) for t in idx])
    return bootstrap_target(q, p_bar, state.alpha)


def total_loss(model: SegNet, batch: TrainBatch, state: BootstrapState, data: list[VideoTensors],
               cfg: TrainConfig) -> LossBreakdown:
    """Evaluate all granularity terms for one batch."""
    n = len(batch.samples)
    k = cfg.segments
    per_video = [s.tracked + list(s.pair) + s.abstract + [s.instance] for s in batch.samples]
    stacked = torch.cat([data[s.video].frames[idx] for s, idx in zip(batch.samples, per_video)])
    feats = model.phi(stacked)
    m = len(per_video[0])
    feats = feats.reshape(n, m, *feats.shape[1:])
    targets = torch.stack([frame_targets(data, state, s.video, idx) for s, idx in zip(batch.samples, per_video)])

    l_frame = bce(model.rho(feats.flatten(0, 1)), targets.flatten(0, 1).to(feats.dtype))

    clips = torch.stack([data[s.video].frames[s.tracked] for s in batch.samples])
    track = forward_backward(model.phi, clips, [s.patch_xy for s in batch.samples], cfg.patch_size,
                             frame_feats=feats[:, :3])
    l_short = short_term_loss(track)

    xi, xj = feats[:, 3], feats[:, 4]
    a_ij = pairwise_affinity(xi, xj)
    a_ji = pairwise_affinity(xj, xi)
    taus = model.kappa(torch.cat([a_ij, a_ji]))
    gh, gw = feats.shape[-2:]
    l_long = 0.0
    surrogate = 0.0
    for v, s in enumerate(batch.samples):
        pair = MatchPair(s.pair[0], s.pair[1], a_ij[v], a_ji[v], taus.select(v), taus.select(n + v), (gh, gw))
        l_long = l_long + long_term_loss(pair)
        surrogate = surrogate + long_term_surrogate(pair)
    l_long = l_long / n
    surrogate = surrogate / n

    abstract = feats[:, 5:5 + k]
    r = torch.stack([aggregate_all(abstract[v]) for v in range(n)])  # (N, K, 2C, h, w)
    readout = model.upsilon(r.flatten(0, 1))
    l_readout = bce(readout, targets[:, 5:5 + k].flatten(0, 1).to(readout.dtype))
    queries = torch.stack([pooled_embedding(r[v, s.query_k]) for v, s in enumerate(batch.samples)])
    bank = InstanceBank(bank_embedding(feats[:, 5 + k]))
    l_global = global_loss(queries, bank, cfg.temperature)

    return LossBreakdown(l_frame, l_short, l_long, l_global, l_readout, surrogate,
                         (cfg.beta1, cfg.beta2, cfg.beta3))


# ------------------------------------------------------------------ loop

class TrainingDivergedError(RuntimeError):
    pass


def bootstrap_relabel(model: SegNet, data: list[VideoTensors], cfg: TrainConfig, state: BootstrapState,
                      seed: int | None = None) -> dict:
    """Store the binarized readout prediction of every training frame."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = {}
    with evaluating(model):
        for v, vt in enumerate(data):
            probs = readout_probabilities(model, embed_frames(model, vt.frames), rng, cfg.segments)
            for t, p in enumerate(probs):
                store[(v, t)] = (p >= 0.5).float()
    state.previous = store
    return store


def build_model(cfg: TrainConfig) -> SegNet:
    return SegNet(BackboneConfig(channels=cfg.channels, seed=cfg.seed), grid=cfg.grid)


def train(cfg: TrainConfig, dataset: VideoDataset, log_path=None, model: SegNet | None = None,
          on_iteration_end: Callable | None = None, progress: bool = False):
    """Run ``bootstrap_iterations`` x ``steps_per_iteration`` SGD steps.

    Returns ``(model, rows)`` where ``rows`` is the step-indexed loss log.
    ``on_iteration_end(iteration, model)`` may return a dict that is stored
    in ``model.iteration_metrics``.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = model or build_model(cfg)
    data = prepare_data(dataset, cfg)
    eligible = _eligible(dataset, cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    state = BootstrapState(alpha=cfg.alpha)
    rows = []
    metrics = []
    writer = fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    step = 0
    try:
        for h in range(1, cfg.bootstrap_iterations + 1):
            state.iteration = h
            model.train()
            for _ in range(cfg.steps_per_iteration):
                batch = sample_batch(dataset, cfg, rng, eligible)
                terms = total_loss(model, batch, state, data, cfg)
                obj = terms.objective()
                if not torch.isfinite(obj):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (iteration {h}): {terms.row()} batch: {batch.describe()}")
                opt.zero_grad()
                obj.backward()
                opt.step()
                row = dict(step=step, iter=h, **terms.row())
                rows.append(row)
                if writer:
                    writer.writerow(row)
                if progress and step % 50 == 0:
                    log.info("step %d iter %d %s", step, h, {k: round(v, 4) for k, v in terms.row().items()})
                step += 1
            if on_iteration_end is not None:
                metrics.append(on_iteration_end(h, model))
            if h < cfg.bootstrap_iterations:
                bootstrap_relabel(model, data, cfg, state)
    finally:
        if fh:
            fh.close()
    model.eval()
    model.iteration_metrics = metrics
    return model, rows


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("step", "iter") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]

