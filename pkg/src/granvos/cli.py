"""``granvos`` command line: generate / train / infer / eval / selfcheck.

Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("granvos")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="granvos", description="Self-supervised video object segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic moving-shape video set")
    g.add_argument("--spec", required=True, help="YAML/JSON mapping of SynthSpec fields")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train from a directory of videos")
    t.add_argument("--config", required=True, help="YAML/JSON mapping of TrainConfig fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--workers", type=int, default=1, help="frame decoding threads")

    i = sub.add_parser("infer", help="segment one video")
    i.add_argument("--mode", required=True, choices=("zvos-object", "zvos-instance", "ovos"))
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True, help="video directory (frames/ or image files)")
    i.add_argument("--first-mask", help="indexed PNG of the first frame, required for ovos")
    i.add_argument("--out", required=True)
    i.add_argument("--overlay", action="store_true", help="also write side-by-side frame+mask PNGs")
    i.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mode", default="object", choices=("object", "instance"))
    e.add_argument("--report", required=True, help="CSV output path")
    e.add_argument("--skip-first", action="store_true", help="ignore frame 0 (given in one-shot mode)")
    e.add_argument("--tolerance", type=int, default=2, help="boundary tolerance in pixels")

    sub.add_parser("selfcheck", help="run gradient and invariant checks")
    return p


def _read_mapping(path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path} must hold a flat mapping")
    return data


def cmd_generate(args) -> int:
    from .dataio import SynthSpec, generate_synthetic
    data = _read_mapping(args.spec)
    known = {f.name for f in fields(SynthSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown spec keys: {', '.join(unknown)}")
    if "shapes" in data:
        data["shapes"] = tuple(data["shapes"])
    ds = generate_synthetic(SynthSpec(**data), args.out)
    print(f"wrote {len(ds)} videos to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import load_dataset
    from .network import save_checkpoint
    from .trainer import load_config, save_config, train
    cfg = load_config(args.config)
    ds = load_dataset(args.data, cfg.frame_size).prefetch(args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, rows = train(cfg, ds, log_path=out / "loss_log.csv", progress=args.verbose)
    save_checkpoint(model, out / "ckpt.pt", extra={"train_config": asdict(cfg)})
    save_config(cfg, out / "config.yaml")
    print(f"trained {len(rows)} steps, final total {rows[-1]['total']:.4f}; checkpoint {out / 'ckpt.pt'}")
    return EXIT_OK


def _overlay(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    from .dataio import mask_palette
    pal = np.array(mask_palette(), dtype=np.uint8).reshape(256, 3)
    color = pal[mask]
    blend = np.where(mask[..., None] > 0, (0.5 * frame + 0.5 * color).astype(np.uint8), frame)
    return np.concatenate([frame, blend], axis=1)


def cmd_infer(args) -> int:
    from .dataio import load_video_dir, read_frame, read_mask, write_frame, write_mask
    from .inference import fields_to_masks, ovos_propagate, tracks_to_labels, zvos_instance, zvos_object
    from .network import load_checkpoint
    model, extra = load_checkpoint(args.ckpt)
    segments = int(extra.get("train_config", {}).get("segments", 8))
    rec = load_video_dir(args.video)
    if rec is None:
        raise FileNotFoundError(f"no frames found in {args.video}")
    frames = np.stack([read_frame(p) for p in rec.frame_paths])
    shape = frames.shape[1:3]
    if args.mode == "zvos-object":
        masks = zvos_object(frames, model, seed=args.seed, segments=segments)
    elif args.mode == "zvos-instance":
        tracks = zvos_instance(frames, model, seed=args.seed, segments=segments)
        masks = tracks_to_labels(tracks, len(frames), shape)
    else:
        first = read_mask(args.first_mask)
        if first.shape != shape:
            raise ValueError(f"first mask is {first.shape}, frames are {shape}")
        masks = fields_to_masks(ovos_propagate(frames, first, model), shape)
    out = Path(args.out)
    for t, m in enumerate(masks):
        write_mask(out / f"{t:05d}.png", m)
        if args.overlay:
            write_frame(out / "overlay" / f"{t:05d}.png", _overlay(frames[t], m))
    print(f"wrote {len(masks)} masks to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    report = evaluate(args.pred, args.gt, args.mode, skip_first=args.skip_first, tolerance_px=args.tolerance)
    report.write(args.report)
    print(report.table())
    if report.missing:
        log.warning("%d ground-truth frames had no prediction", len(report.missing))
    if not report.videos:
        raise FileNotFoundError("no predictions matched any ground-truth video")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all
    results = run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "infer" and args.mode == "ovos" and not args.first_mask:
        parser.print_usage(sys.stderr)
        print("granvos infer: error: --first-mask is required for --mode ovos", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit 1
        if args.verbose:
            log.exception("command failed")
        print(f"granvos {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
