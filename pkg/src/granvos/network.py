"""Feature extractor, prediction heads, and the geometric-transform regressor."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .core import STRIDE, DimensionError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class BackboneConfig:
    channels: int = 64
    stride: int = STRIDE
    blocks: int = 4
    dilation: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.stride != STRIDE:
            raise ValueError(f"stride must be {STRIDE}")
        if self.blocks < 2:
            raise ValueError("need at least two blocks for stride 4")


@dataclass
class TransformParams:
    """Six-parameter affine map; tensors may carry a leading batch dim."""
    tx: torch.Tensor
    ty: torch.Tensor
    theta: torch.Tensor
    sx: torch.Tensor
    sy: torch.Tensor
    shear: torch.Tensor

    @classmethod
    def identity(cls, dtype=torch.float32) -> "TransformParams":
        z = torch.zeros((), dtype=dtype)
        o = torch.ones((), dtype=dtype)
        return cls(z, z.clone(), z.clone(), o, o.clone(), z.clone())

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "TransformParams":
        """``raw[..., :]`` = (tx, ty, theta, log sx, log sy, shear)."""
        return cls(raw[..., 0], raw[..., 1], raw[..., 2], raw[..., 3].exp(), raw[..., 4].exp(), raw[..., 5])

    @classmethod
    def translation(cls, tx: float, ty: float, dtype=torch.float32) -> "TransformParams":
        p = cls.identity(dtype)
        p.tx = torch.tensor(tx, dtype=dtype)
        p.ty = torch.tensor(ty, dtype=dtype)
        return p

    def _fields(self):
        return (self.tx, self.ty, self.theta, self.sx, self.sy, self.shear)

    def detach(self) -> "TransformParams":
        return TransformParams(*(f.detach() for f in self._fields()))

    def select(self, i: int) -> "TransformParams":
        return TransformParams(*(f[i] for f in self._fields()))

    def matrix(self) -> torch.Tensor:
        """Linear part R(theta) @ Shear @ Scale, shape ``(..., 2, 2)``."""
        c, s = torch.cos(self.theta), torch.sin(self.theta)
        a = self.sx
        b = self.shear * self.sy
        d = self.sy
        row0 = torch.stack([c * a, c * b - s * d], dim=-1)
        row1 = torch.stack([s * a, s * b + c * d], dim=-1)
        return torch.stack([row0, row1], dim=-2)


def apply_transform(tau: TransformParams, coord, center=(0.0, 0.0)) -> torch.Tensor:
    """Map ``(x, y)`` points: scale/shear/rotate about ``center``, then translate.

    ``coord`` is ``(2,)`` or ``(P, 2)``; with batched params ``(B,)`` the
    result is ``(B, P, 2)``.
    """
    m = tau.matrix()
    pts = torch.as_tensor(coord, dtype=m.dtype)
    c = torch.as_tensor(center, dtype=m.dtype)
    t = torch.stack([tau.tx, tau.ty], dim=-1)
    rel = pts - c
    out = rel @ m.transpose(-1, -2)
    if m.dim() == 3 and rel.dim() == 2:
        t = t[:, None, :]
    return out + c + t


class Block(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, dilation: int, pointwise: bool, last: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.pointwise = pointwise
        self.last = last
        self.act = nn.ReLU()
        if pointwise:
            self.conv2 = nn.Conv2d(cout, cout, 1, bias=False)
            self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = self.bn1(self.conv1(x))
        if self.pointwise:
            x = self.bn2(self.conv2(self.act(x)))
        return x if self.last else self.act(x)


class Backbone(nn.Module):
    """Strided conv net: stride 2, 2, then 1 with dilation in the last block.

    Ends on a normalization layer with no rectifier, so embeddings are signed.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        cin = 3
        for i in range(1, cfg.blocks + 1):
            stride = 2 if i <= 2 else 1
            dilation = cfg.dilation if i == cfg.blocks else 1
            width = c if i > 1 else max(c // 2, 1)
            setattr(self, f"block{i}", Block(cin, width, stride, dilation, pointwise=i > 2, last=i == cfg.blocks))
            cin = width

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        squeeze = frames.dim() == 3
        x = frames.unsqueeze(0) if squeeze else frames
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise DimensionError(f"input dims {h}x{w} not divisible by {STRIDE}")
        x = x - 0.5
        for i in range(1, self.cfg.blocks + 1):
            x = getattr(self, f"block{i}")(x)
        return x[0] if squeeze else x


class FgHead(nn.Module):
    """1x1 conv + sigmoid producing per-cell foreground probability."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.proj.in_channels:
            raise DimensionError(f"expected {self.proj.in_channels} channels, got {x.shape[-3]}")
        return torch.sigmoid(self.proj(x)).squeeze(-3)


class ReadoutHead(nn.Module):
    """Two 3x3 convs with ReLU, then a 1x1 sigmoid projection."""

    def __init__(self, channels: int):
        super().__init__()
        self.in_channels = 2 * channels
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.proj = nn.Conv2d(channels, 1, 1)
        self.act = nn.ReLU()

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        if r.shape[-3] != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} channels, got {r.shape[-3]}")
        h = self.act(self.conv1(r))
        h = self.act(self.conv2(h))
        return torch.sigmoid(self.proj(h)).squeeze(-3)


class TransformRegressor(nn.Module):
    """Regresses six transform parameters from a dense affinity.

    The ``(R, H*W)`` affinity is viewed as an ``R``-channel image over the
    query grid. The final linear layer starts at zero, giving the identity.
    """

    def __init__(self, grid: int, hidden: int = 64):
        super().__init__()
        self.grid = grid
        cells = grid * grid
        self.conv1 = nn.Conv2d(cells, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden // 2, 3, padding=1)
        self.fc = nn.Linear(hidden // 2 * cells, 6)
        self.act = nn.ReLU()
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, affinity: torch.Tensor) -> TransformParams:
        a = affinity.unsqueeze(0) if affinity.dim() == 2 else affinity
        b, rows, cols = a.shape
        g = self.grid
        if rows != g * g or cols != g * g:
            raise DimensionError(f"affinity {rows}x{cols} does not match a {g}x{g} grid")
        h = self.act(self.conv1(a.reshape(b, rows, g, g)))
        h = self.act(self.conv2(h))
        raw = self.fc(h.flatten(1))
        tau = TransformParams.from_raw(raw)
        if affinity.dim() == 2:
            tau = tau.select(0)
        return tau


class SegNet(nn.Module):
    """All trainable parts; parameter names follow phi.* / rho.* / upsilon.* / kappa.*."""

    def __init__(self, cfg: BackboneConfig | None = None, grid: int = 16):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.grid = grid
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            self.phi = Backbone(self.cfg)
            self.rho = FgHead(self.cfg.channels)
            self.upsilon = ReadoutHead(self.cfg.channels)
            self.kappa = TransformRegressor(grid)

    @property
    def channels(self) -> int:
        return self.cfg.channels


def save_checkpoint(model: SegNet, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": asdict(model.cfg),
        "grid": model.grid,
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    model = SegNet(BackboneConfig(**payload["backbone"]), grid=payload["grid"])
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload.get("extra", {})


def default_center(h: int, w: int) -> tuple[float, float]:
    return ((w - 1) / 2.0, (h - 1) / 2.0)


__all__ = [
    "BackboneConfig", "TransformParams", "apply_transform", "SegNet", "Backbone",
    "FgHead", "ReadoutHead", "TransformRegressor", "save_checkpoint", "load_checkpoint",
]
