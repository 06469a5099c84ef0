"""Desk-scale learning smoke: train 2 x 300 steps on 4 synthetic videos and
score one held-out video.

    python scripts/learning_smoke.py --out runs/smoke [--lr 0.001] [--channels 64]
"""
import argparse
import json
import logging
from pathlib import Path

from granvos.experiments import run_learning_smoke
from granvos.network import save_checkpoint
from granvos.trainer import desk_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--channels", type=int, default=None)
    ap.add_argument("--steps", type=int, default=None, help="steps per bootstrap iteration")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {k: v for k, v in dict(lr=args.lr, channels=args.channels, steps_per_iteration=args.steps,
                                       seed=args.seed).items() if v is not None}
    cfg = desk_config(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_learning_smoke(out, cfg, log_path=out / "loss_log.csv")
    save_checkpoint(res.model, out / "ckpt.pt")
    summary = dict(initial_total=res.initial_total, final_total=res.final_total, ovos_trained=res.ovos_trained,
                   ovos_random=res.ovos_random, zvos_by_iteration=res.zvos_by_iteration, seconds=res.seconds)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
