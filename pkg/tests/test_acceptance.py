"""Acceptance criteria. Each test records one PASS/FAIL line, printed in the
terminal summary. The learning smoke test trains for 2 x 300 steps on CPU
(several minutes)."""
import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record
from oracles import boundary_f_oracle, brute_correlation, enumerate_long_term, random_masks, random_tau
from granvos.core import cross_correlate
from granvos.experiments import BENCHMARK_SCALE_NOTE, run_learning_smoke
from granvos.loss_long_video import MatchPair, long_term_loss, pairwise_affinity
from granvos.metrics import boundary_accuracy
from granvos.selfcheck import gradient_suite, identity_propagation_check, normalization_suite
from granvos.trainer import LOG_COLUMNS, TrainConfig, combine_terms, desk_config, read_loss_log

ROOT = Path(__file__).resolve().parents[1]

# thresholds for the desk-scale learning smoke
LOSS_RATIO = 0.5
OVOS_TRAINED_MIN = 0.70
OVOS_RANDOM_MAX = 0.40
SMOKE_BUDGET_S = 20 * 60


def test_benchmark_scale_is_declared_out_of_reach():
    readme = (ROOT / "README.md").read_text()
    ok = "not reproducible at desk scale" in BENCHMARK_SCALE_NOTE and "not reproducible at desk scale" in readme
    assert record("benchmark-scale result declared not desk-reproducible", ok, BENCHMARK_SCALE_NOTE[:60] + "...")


def test_gradient_suite():
    t0 = time.time()
    results = gradient_suite()
    dt = time.time() - t0
    ok = all(r.passed for r in results) and dt < 120
    worst = max(results, key=lambda r: r.value)
    assert record("gradient suite (rtol 1e-2, h 1e-3, < 2 min)", ok,
                  f"{sum(r.passed for r in results)}/{len(results)} pass, worst '{worst.name}' {worst.detail}, {dt:.1f}s"), \
        [r.line() for r in results]


def test_normalization_suite():
    t0 = time.time()
    results = normalization_suite()
    dt = time.time() - t0
    ok = all(r.passed for r in results) and dt < 60
    assert record("normalization suite (< 1 min)", ok, "; ".join(f"{r.name}: {r.detail}" for r in results)
                  + f"; {dt:.1f}s"), [r.line() for r in results]


def _boundary_oracle_dev():
    return max(abs(boundary_accuracy(a, b, 2) - boundary_f_oracle(a, b, 2)) for a, b in random_masks(100))


def _long_term_oracle_dev():
    g = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        x_i = torch.tensor(g.standard_normal((5, 4, 4)))
        x_j = torch.tensor(g.standard_normal((5, 4, 4)))
        a_ij, a_ji = pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i)
        t_ij, t_ji = random_tau(g), random_tau(g)
        got = long_term_loss(MatchPair(0, 6, a_ij, a_ji, t_ij, t_ji, (4, 4))).item()
        worst = max(worst, abs(got - enumerate_long_term(a_ij, a_ji, t_ij, t_ji, 4, 4)))
    return worst


def _planted_argmax_ok():
    g = np.random.default_rng(0)
    for trial in range(10):
        c, size = 4, int(g.integers(2, 5))
        s = g.standard_normal((c, 10, 10))
        s /= np.linalg.norm(s, axis=0, keepdims=True)
        x0, y0 = (int(v) for v in g.integers(0, 10 - size + 1, size=2))
        k = s[:, y0:y0 + size, x0:x0 + size].copy()
        brute = brute_correlation(k, s)
        resp = cross_correlate(torch.tensor(k), torch.tensor(s)).numpy()
        if np.unravel_index(resp.argmax(), resp.shape) != np.unravel_index(brute.argmax(), brute.shape):
            return False
    return True


def test_oracle_suite():
    f_dev = _boundary_oracle_dev()
    l_dev = _long_term_oracle_dev()
    argmax_ok = _planted_argmax_ok()
    ok = f_dev <= 1e-6 and l_dev <= 1e-6 and argmax_ok
    assert record("oracle suite", ok, f"boundary F vs distance transform max dev {f_dev:.1e} (100 pairs); "
                  f"long-term loss vs enumeration max dev {l_dev:.1e} (4x4); planted-patch argmax match {argmax_ok}")


def test_identity_propagation():
    res = identity_propagation_check()
    assert record("identity propagation reproduces the first-frame mask exactly", res.passed)


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    work = tmp_path_factory.mktemp("smoke")
    t0 = time.time()
    result = run_learning_smoke(work, desk_config(), log_path=work / "loss_log.csv")
    result.wall = time.time() - t0
    result.log_path = work / "loss_log.csv"
    return result


def test_learning_smoke_loss_halves(smoke):
    ok = smoke.final_total <= LOSS_RATIO * smoke.initial_total
    assert record("learning smoke (a): final total <= 0.5 x initial", ok,
                  f"initial {smoke.initial_total:.4f}, final {smoke.final_total:.4f}")


def test_learning_smoke_ovos(smoke):
    ok = smoke.ovos_trained >= OVOS_TRAINED_MIN and smoke.ovos_random <= OVOS_RANDOM_MAX
    assert record("learning smoke (b): held-out O-VOS J trained >= 0.70, random init <= 0.40", ok,
                  f"trained {smoke.ovos_trained:.4f}, random {smoke.ovos_random:.4f}")


def test_learning_smoke_bootstrap_trend(smoke):
    j1, j2 = smoke.zvos_by_iteration
    assert record("learning smoke (c): iteration-2 validation J >= iteration-1", j2 >= j1,
                  f"iteration 1 {j1:.4f}, iteration 2 {j2:.4f}")


def test_learning_smoke_runtime(smoke):
    assert record("learning smoke runtime < 20 min", smoke.wall < SMOKE_BUDGET_S, f"{smoke.wall:.0f}s")


def test_total_loss_bookkeeping(smoke):
    cfg = desk_config()
    betas_exact = (cfg.beta1, cfg.beta2, cfg.beta3) == (0.1, 0.02, 0.5) == (
        TrainConfig.beta1, TrainConfig.beta2, TrainConfig.beta3)
    logged = read_loss_log(smoke.log_path)
    worst = 0.0
    for r in logged:
        want = combine_terms(r["L_frame"], r["L_short"], r["L_long"], r["L_global"])
        worst = max(worst, abs(r["total"] - want) / max(1.0, abs(want)))
    ok = betas_exact and len(logged) == 600 and tuple(logged[0]) == LOG_COLUMNS and worst <= 1e-5
    assert record("total = frame + 0.1 short + 0.02 long + 0.5 global at every logged step", ok,
                  f"{len(logged)} steps, max rel reconstruction error {worst:.1e}")


def test_cli_end_to_end(tmp_path):
    from test_cli import run_pipeline
    t0 = time.time()
    codes, report = run_pipeline(tmp_path)
    dt = time.time() - t0
    rows = list(csv.DictReader(report.open()))
    j = float(next(r for r in rows if r["video"] == "video000")["J_mean"])
    ok = all(c == 0 for c in codes) and dt < 300 and 0.0 <= j <= 1.0 and not math.isnan(j)
    assert record("CLI generate -> train 50 steps -> infer (3 modes) -> eval, exit 0, < 5 min", ok,
                  f"exit codes {codes}, {dt:.0f}s, O-VOS J {j:.3f}")
