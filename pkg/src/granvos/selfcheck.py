"""Programmatic gradient and invariant checks, run by ``granvos selfcheck``
and by the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .core import column_softmax, gaussian_target
from .gradcheck import check_gradients
from .inference import LabelField, ovos_propagate, propagate_step
from .loss_frame_short import PatchTrack, bootstrap_frame_loss, frame_loss, short_term_loss, track_step
from .loss_long_video import (MatchPair, bank_embedding, global_loss, instance_probabilities, long_term_loss,
                              pairwise_affinity, pooled_embedding)
from .network import BackboneConfig, SegNet, TransformParams


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    detail: str = ""
    value: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def _grad(name: str, fn: Callable, tensors, model=None, rtol: float = 1e-2) -> CheckOutcome:
    res = check_gradients(fn, tensors, h=1e-3, model=model)
    return CheckOutcome(name, res.passed(rtol=rtol),
                        f"max rel err {res.max_rel_error:.2e}, skipped {res.skipped_fraction:.0%}", res.max_rel_error)


def _toy_net() -> SegNet:
    return SegNet(BackboneConfig(channels=4, seed=3), grid=4).double().train()


def gradient_suite() -> list[CheckOutcome]:
    """Central differences for every loss term, through the heads and on toy tensors."""
    g = torch.Generator().manual_seed(0)
    f64 = dict(dtype=torch.float64, generator=g)
    net = _toy_net()
    out = []

    feats = torch.randn(2, 4, 4, 4, **f64)
    q = (torch.rand(2, 4, 4, **f64) > 0.5).double()
    out.append(_grad("frame loss wrt rho", lambda: frame_loss(net.rho(feats), q), net.rho.parameters(), net.rho))

    p_bar = (torch.rand(2, 4, 4, **f64) > 0.5).double()
    out.append(_grad("bootstrapped frame loss wrt rho",
                     lambda: bootstrap_frame_loss(net.rho(feats), q, p_bar, 0.05), net.rho.parameters(), net.rho))

    frames = torch.rand(2, 3, 16, 16, **f64)
    proj = torch.randn(2, 4, 4, 4, **f64)
    out.append(_grad("frame loss wrt phi", lambda: frame_loss(net.rho(net.phi(frames) * proj), q[:2]),
                     net.phi.parameters(), net.phi))

    kern = torch.randn(4, 2, 2, **f64, requires_grad=True)
    frame = torch.randn(4, 4, 4, **f64, requires_grad=True)
    tgt = gaussian_target((1, 1), 2, (4, 4), dtype=torch.float64).data.unsqueeze(0)

    def short():
        resp, _ = track_step(kern, frame)
        return short_term_loss(PatchTrack(None, [], [], resp.unsqueeze(0), tgt, None))
    out.append(_grad("short-term loss wrt features", short, [kern, frame]))

    x_i = torch.randn(4, 3, 3, **f64, requires_grad=True)
    x_j = torch.randn(4, 3, 3, **f64, requires_grad=True)
    tau = TransformParams.translation(0.3, -0.2, torch.float64)
    out.append(_grad("long-term loss wrt features",
                     lambda: long_term_loss(MatchPair(0, 6, pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i),
                                                      tau, tau, (3, 3))), [x_i, x_j]))

    abstract = torch.randn(3, 4, 3, 3, **f64, requires_grad=True)
    inst = torch.randn(3, 4, 3, 3, **f64, requires_grad=True)

    def glob():
        qs = torch.stack([pooled_embedding(torch.cat([abstract[n], abstract[n]])) for n in range(3)])
        return global_loss(qs, bank_embedding(inst))
    out.append(_grad("global loss wrt features", glob, [abstract, inst]))

    r = torch.randn(1, 8, 4, 4, **f64)
    t = (torch.rand(1, 4, 4, **f64) > 0.5).double()
    out.append(_grad("readout loss wrt upsilon", lambda: frame_loss(net.upsilon(r), t),
                     net.upsilon.parameters(), net.upsilon))
    return out


def normalization_suite(seed: int = 0) -> list[CheckOutcome]:
    g = torch.Generator().manual_seed(seed)
    out = []

    worst = 0.0
    for _ in range(20):
        a = pairwise_affinity(torch.randn(8, 5, 6, generator=g), torch.randn(8, 5, 6, generator=g))
        worst = max(worst, (a.sum(0) - 1).abs().max().item())
    s = column_softmax(torch.randn(30, 7, generator=g) * 50)
    worst = max(worst, (s.sum(0) - 1).abs().max().item())
    out.append(CheckOutcome("affinity columns sum to 1", worst <= 1e-5, f"max dev {worst:.1e}"))

    worst = 0.0
    for _ in range(20):
        q = torch.randn(5, 16, generator=g, dtype=torch.float64)
        bank = torch.randn(7, 16, generator=g, dtype=torch.float64)
        worst = max(worst, (instance_probabilities(q, bank).sum(-1) - 1).abs().max().item())
    out.append(CheckOutcome("instance probabilities sum to 1", worst <= 1e-6, f"max dev {worst:.1e}"))

    worst = 0.0
    for _ in range(20):
        labels = torch.randint(0, 3, (4, 5), generator=g)
        y = torch.nn.functional.one_hot(labels, 3).permute(2, 0, 1).float()
        a = pairwise_affinity(torch.randn(8, 4, 5, generator=g), torch.randn(8, 4, 5, generator=g))
        v, _ = propagate_step(a, y)
        worst = max(worst, (v.sum(0) - 1).abs().max().item())
    out.append(CheckOutcome("propagated label mass per cell is 1", worst <= 1e-5, f"max dev {worst:.1e}"))

    worst = 0.0
    for _ in range(20):
        ra = torch.randn(6, 4, 5, generator=g, dtype=torch.float64)
        rb = torch.randn(6, 3, 2, generator=g, dtype=torch.float64)
        gram = ra.reshape(6, -1).T @ rb.reshape(6, -1)
        worst = max(worst, abs(gram.mean().item() - float(pooled_embedding(ra) @ pooled_embedding(rb))))
    out.append(CheckOutcome("pooled Gram equals dot of pooled maps", worst <= 1e-5, f"max dev {worst:.1e}"))
    return out


def identity_propagation_check(seed: int = 0) -> CheckOutcome:
    """Injected identity affinity must reproduce the first-frame field on every frame."""
    rng = np.random.default_rng(seed)
    model = SegNet(BackboneConfig(channels=8), grid=8).eval()
    frames = (rng.random((6, 32, 32, 3)) * 255).astype(np.uint8)
    ids = rng.integers(0, 3, (8, 8))
    first = LabelField(torch.nn.functional.one_hot(torch.as_tensor(ids), 3).permute(2, 0, 1).float(), [0, 1, 2])
    fields = ovos_propagate(frames, first, model, affinity_fn=lambda a, b: torch.eye(a.shape[-1] * a.shape[-2]))
    ok = all(np.array_equal(f.to_ids(), first.to_ids()) for f in fields) and len(fields) == 6
    return CheckOutcome("identity propagation is exact", ok)


def run_all() -> list[CheckOutcome]:
    t0 = time.time()
    out = gradient_suite() + normalization_suite() + [identity_propagation_check()]
    out.append(CheckOutcome("selfcheck runtime", True, f"{time.time() - t0:.1f}s"))
    return out


def main() -> int:
    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
