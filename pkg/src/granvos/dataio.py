"""Frame/mask directory I/O and the synthetic moving-shape video generator.

Layout: ``root/<video_id>/frames/%05d.png`` and ``root/<video_id>/masks/%05d.png``.
Masks are 8-bit indexed PNGs, 0 = background and 1..L = instance ids.
"""
from __future__ import annotations

import colorsys
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def mask_palette() -> list[int]:
    base = [(0, 0, 0), (236, 95, 103), (102, 204, 153), (102, 153, 255), (249, 200, 90),
            (197, 148, 199), (95, 179, 179), (250, 145, 87)]
    pal = []
    for i in range(256):
        pal.extend(base[i] if i < len(base) else (i, i, i))
    return pal


def write_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    img.putpalette(mask_palette())
    img.save(path)


def read_mask(path, size: int | None = None) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    if img.mode not in ("P", "L"):
        img = img.convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return np.array(img, dtype=np.uint8)


def write_frame(path, frame: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="RGB").save(path)


def read_frame(path, size: int | None = None) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    img = img.convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.array(img, dtype=np.uint8)


def _images_in(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class VideoRecord:
    id: str
    frame_paths: list
    mask_paths: list | None = None

    def __len__(self):
        return len(self.frame_paths)


@dataclass
class VideoDataset:
    videos: list
    frame_size: int | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.videos)

    def frames(self, i: int) -> np.ndarray:
        """``(T, S, S, 3)`` uint8 frames of video ``i``, cached."""
        key = ("f", i)
        if key not in self._cache:
            self._cache[key] = np.stack([read_frame(p, self.frame_size) for p in self.videos[i].frame_paths])
        return self._cache[key]

    def masks(self, i: int) -> np.ndarray | None:
        rec = self.videos[i]
        if not rec.mask_paths:
            return None
        key = ("m", i)
        if key not in self._cache:
            self._cache[key] = np.stack([read_mask(p, self.frame_size) for p in rec.mask_paths])
        return self._cache[key]

    def prefetch(self, workers: int = 1) -> "VideoDataset":
        """Decode every video up front with at most ``workers`` threads."""
        def load(i):
            return i, self.frames(i), self.masks(i)
        if workers <= 1:
            for i in range(len(self)):
                load(i)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(load, range(len(self))))
        return self


def load_video_dir(video_dir, frame_size: int | None = None) -> VideoRecord | None:
    video_dir = Path(video_dir)
    frames_dir = video_dir / "frames"
    frames = _images_in(frames_dir) if frames_dir.is_dir() else _images_in(video_dir)
    if not frames:
        log.warning("skipping empty video directory %s", video_dir)
        return None
    masks = _images_in(video_dir / "masks") or None
    return VideoRecord(video_dir.name, frames, masks)


def load_dataset(root, frame_size: int | None = None) -> VideoDataset:
    """Enumerate ``root/<video_id>/`` subdirectories in lexicographic order.

    Frames are resized (aspect-distorting) to ``frame_size`` squares when
    given; masks use nearest-neighbour resizing.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    videos = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        rec = load_video_dir(sub, frame_size)
        if rec is not None:
            videos.append(rec)
    return VideoDataset(videos, frame_size)


# ---------------------------------------------------------------- synthetic

SHAPES = ("square", "disc", "triangle")


@dataclass
class SynthSpec:
    num_videos: int = 4
    frames_per_video: int = 24
    frame_size: int = 64
    min_objects: int = 1
    max_objects: int = 1
    shapes: tuple = SHAPES
    min_object_size: int = 20
    max_object_size: int = 28
    min_speed: float = 0.5
    max_speed: float = 1.5
    texture_noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_video < 6:
            raise ValueError("frames_per_video must be >= 6")
        if not 1 <= self.min_objects <= self.max_objects <= 3:
            raise ValueError("objects per video must lie in 1..3")
        bad = set(self.shapes) - set(SHAPES)
        if bad:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        self.shapes = tuple(self.shapes)


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Binary footprint of ``shape`` inside a ``size x size`` box."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        r = size / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top center, base along the bottom edge
        return (yy >= size * 0.05) & (np.abs(xx - size / 2.0) <= (yy / size) * size / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((h, w, 3))
    noise = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    return noise / (noise.std() + 1e-12)


def _reflect(p: float, v: float, hi: float) -> tuple[float, float]:
    p += v
    if p < 0:
        p, v = -p, -v
    elif p > hi:
        p, v = 2 * hi - p, -v
    return p, v


def render_video(spec: SynthSpec, rng: np.random.Generator):
    """Return frames ``(T, S, S, 3)`` uint8, masks ``(T, S, S)`` uint8 and metadata."""
    s, t = spec.frame_size, spec.frames_per_video
    bg_color = 0.45 + 0.1 * rng.random(3)
    lum = _texture(rng, s, s, 2.0)[..., :1]
    bg = np.clip(bg_color + 0.08 * lum + 0.02 * _texture(rng, s, s, 2.0), 0, 1)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for k in range(n_obj):
        size = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        color = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.7, 1.0), rng.uniform(0.8, 1.0)))
        tex = np.clip(color + spec.texture_noise * _texture(rng, size, size, 1.0), 0, 1)
        speed = rng.uniform(spec.min_speed, spec.max_speed)
        ang = rng.uniform(0, 2 * np.pi)
        objects.append(dict(
            id=k + 1, shape=shape, size=size, color=color.tolist(),
            pos=[float(rng.uniform(0, s - size)), float(rng.uniform(0, s - size))],
            vel=[float(speed * np.cos(ang)), float(speed * np.sin(ang))],
            footprint=shape_mask(shape, size), texture=tex,
        ))
    frames = np.empty((t, s, s, 3), dtype=np.uint8)
    masks = np.zeros((t, s, s), dtype=np.uint8)
    trajectories = {o["id"]: [] for o in objects}
    for f in range(t):
        img = bg.copy()
        lab = np.zeros((s, s), dtype=np.uint8)
        for o in objects:
            x0, y0 = int(round(o["pos"][0])), int(round(o["pos"][1]))
            fp = o["footprint"]
            sz = o["size"]
            region = (slice(y0, y0 + sz), slice(x0, x0 + sz))
            img[region][fp] = o["texture"][fp]
            lab[region][fp] = o["id"]
            trajectories[o["id"]].append([o["pos"][0] + sz / 2.0, o["pos"][1] + sz / 2.0])
        frames[f] = np.round(img * 255).astype(np.uint8)
        masks[f] = lab
        for o in objects:
            hi = float(s - o["size"])
            o["pos"][0], o["vel"][0] = _reflect(o["pos"][0], o["vel"][0], hi)
            o["pos"][1], o["vel"][1] = _reflect(o["pos"][1], o["vel"][1], hi)
    meta = dict(objects=[dict(id=o["id"], shape=o["shape"], size=o["size"], color=o["color"]) for o in objects],
                centers={str(k): v for k, v in trajectories.items()})
    return frames, masks, meta


def generate_synthetic(spec: SynthSpec, out_dir) -> VideoDataset:
    """Write ``spec.num_videos`` videos under ``out_dir``; deterministic per seed."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    for v in range(spec.num_videos):
        frames, masks, meta = render_video(spec, rng)
        vdir = out / f"video{v:03d}"
        for f in range(len(frames)):
            write_frame(vdir / "frames" / f"{f:05d}.png", frames[f])
            write_mask(vdir / "masks" / f"{f:05d}.png", masks[f])
        meta["spec"] = asdict(spec)
        (vdir / "meta.json").write_text(json.dumps(meta, indent=1))
    return load_dataset(out)
