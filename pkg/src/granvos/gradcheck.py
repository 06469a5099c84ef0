"""Central finite-difference gradient verification.

Rectifier kinks make a central difference meaningless when the stencil
crosses one, so stencil points where any ``nn.ReLU`` input changes sign are
excluded and counted separately.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import torch
import torch.nn as nn


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    per_tensor: list

    @property
    def skipped_fraction(self) -> float:
        total = self.checked + self.skipped
        return self.skipped / total if total else 0.0

    def passed(self, rtol: float = 1e-2, max_skipped: float = 0.3) -> bool:
        return self.max_rel_error <= rtol and self.skipped_fraction <= max_skipped


class _SignRecorder:
    def __init__(self, modules: Iterable[nn.Module]):
        self.records: list[torch.Tensor] = []
        self.handles = [m.register_forward_hook(self._hook) for m in modules]

    def _hook(self, module, inputs, output):
        self.records.append((inputs[0] > 0).detach().clone())

    def take(self) -> list[torch.Tensor]:
        out, self.records = self.records, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def check_gradients(fn: Callable[[], torch.Tensor], tensors, h: float = 1e-3,
                    model: nn.Module | None = None) -> GradCheckResult:
    """Compare autograd against central differences for every element.

    Error is measured per tensor as ``||g_auto - g_fd|| / ||g_fd||`` over the
    non-skipped elements. ``model`` (if given) is scanned for ReLU modules.
    """
    tensors = list(tensors)
    relus = [m for m in model.modules() if isinstance(m, nn.ReLU)] if model is not None else []
    rec = _SignRecorder(relus)
    try:
        for t in tensors:
            t.grad = None
        fn().backward()
        base = rec.take()
        checked = skipped = 0
        per_tensor = []
        with torch.no_grad():
            for t in tensors:
                analytic = t.grad.detach().clone().double().reshape(-1)
                flat = t.data.reshape(-1)
                keep, numeric = [], []
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = fn().item()
                    s_up = rec.take()
                    flat[i] = orig - h
                    down = fn().item()
                    s_down = rec.take()
                    flat[i] = orig
                    if relus and not (_same(base, s_up) and _same(base, s_down)):
                        skipped += 1
                        continue
                    keep.append(i)
                    numeric.append((up - down) / (2 * h))
                    checked += 1
                if not keep:
                    per_tensor.append(0.0)
                    continue
                a = analytic[keep]
                n = torch.tensor(numeric, dtype=torch.float64)
                denom = max(n.norm().item(), a.norm().item(), 1e-12)
                per_tensor.append((a - n).norm().item() / denom)
    finally:
        rec.close()
    return GradCheckResult(max(per_tensor, default=0.0), checked, skipped, per_tensor)
