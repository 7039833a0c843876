"""Command-line entry point: ``unsuperpoint {train,detect,evaluate,diagnose,export}``.

Settings resolve as command-line flag > config file > built-in default. The
config file comes from ``--config`` or, failing that, $UNSUPERPOINT_CONFIG.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np

from .config import CONFIG_ENV_VAR, load_config

logger = logging.getLogger("unsuperpoint")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"{path} does not exist")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unsuperpoint", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=_existing, help=f"flat YAML/JSON config (default: ${CONFIG_ENV_VAR})")
    parser.add_argument("--seed", type=int, help="seed for every random choice")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="self-supervised training on an unlabeled image directory")
    p.add_argument("--corpus", type=_existing, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=_existing, help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))

    p = sub.add_parser("detect", help="write top-N detections for images")
    p.add_argument("--checkpoint", type=_existing, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-n", "--n-points", type=int)
    p.add_argument("--nms-radius", type=float)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--binary", action="store_true", help="binary interchange format instead of text")
    p.add_argument("--overlay", action="store_true", help="also write an annotated PNG per image")
    p.add_argument("images", nargs="+", type=Path)

    p = sub.add_parser("evaluate", help="HPatches-style benchmark (RS, LE, MS, HA)")
    p.add_argument("--dataset", type=_existing, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=_existing)
    src.add_argument("--detections", type=_existing, help="directory of <scene>/<index>.{txt,bin} files")
    p.add_argument("--report", type=Path, required=True, help="JSON report path; a .txt summary is written alongside")
    p.add_argument("-n", "--n-points", type=int)
    p.add_argument("--nms-radius", type=float)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--name", default="")

    p = sub.add_parser("diagnose", help="histograms of a trained model, or a match overlay for an image pair")
    mode = p.add_subparsers(dest="mode", required=True)
    h = mode.add_parser("histograms")
    h.add_argument("--checkpoint", type=_existing, required=True)
    h.add_argument("--corpus", type=_existing, required=True)
    h.add_argument("--out", type=Path, required=True)
    h.add_argument("--pairs", type=int, default=20)
    m = mode.add_parser("matches")
    m.add_argument("--checkpoint", type=_existing, required=True)
    m.add_argument("--ref", type=_existing, required=True)
    m.add_argument("--tgt", type=_existing, required=True)
    m.add_argument("--homography", type=_existing, help="ground truth H_1_k file")
    m.add_argument("--out", type=Path, required=True)
    m.add_argument("-n", "--n-points", type=int)
    m.add_argument("--nms-radius", type=float)

    p = sub.add_parser("export", help="comparison table across evaluation reports")
    p.add_argument("reports", nargs="+", type=_existing)
    p.add_argument("--out", type=Path, help="machine-readable JSON output")
    return parser


def _overrides(args) -> dict:
    ov = {"seed": args.seed}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
                      ("n_points", "n_points"), ("nms_radius", "nms_radius"), ("steps", "max_steps")):
        ov[key] = getattr(args, flag, None)
    res = getattr(args, "resolution", None)
    if res is not None:
        ov["eval_resolution" if args.command in ("evaluate", "detect") else "resolution"] = tuple(res)
    return ov


def cmd_train(args, cfg) -> int:
    from .training import Trainer, list_images

    train_cfg = cfg.train
    train_cfg.corpus_path = str(args.corpus)
    if not list_images(args.corpus):
        logger.error("no images found under %s", args.corpus)
        return 1
    trainer = Trainer(train_cfg, cfg.model, cfg.weights)
    if args.resume:
        trainer.load(args.resume)
    trainer.fit(args.out)
    logger.info("finished at step %d; %d correspondence-free batches", trainer.step,
                trainer.correspondence_free_batches)
    return 0


def _load_model(path):
    from .model import load_checkpoint

    model, payload = load_checkpoint(path)
    norm = payload.get("extra", {}).get("train_config", {}).get("normalization", "multiply")
    return model, norm


def cmd_detect(args, cfg) -> int:
    from .evaluation import ModelDetector, apply_protocol, write_detections
    from .training import load_image
    from .visualize import draw_points

    model, norm = _load_model(args.checkpoint)
    detector = ModelDetector(model, norm)
    args.out.mkdir(parents=True, exist_ok=True)
    failed = []
    for path in args.images:
        try:
            img = load_image(path, cfg.eval.resolution)
        except OSError as exc:
            logger.error("%s", exc)
            failed.append(path)
            continue
        ps = apply_protocol(detector(img, path.stem), cfg.eval.n_points, cfg.eval.nms_radius)
        write_detections(args.out / (path.stem + (".bin" if args.binary else ".txt")), ps, args.binary)
        if args.overlay:
            cv2.imwrite(str(args.out / f"{path.stem}_points.png"), draw_points(img, ps.positions))
    for path in failed:
        print(f"failed: {path}", file=sys.stderr)
    return 1 if len(failed) == len(args.images) else (2 if failed else 0)


def cmd_evaluate(args, cfg) -> int:
    from .evaluation import FileDetector, ModelDetector, run_benchmark

    if args.checkpoint:
        model, norm = _load_model(args.checkpoint)
        detector = ModelDetector(model, norm)
    else:
        detector = FileDetector(args.detections)
    report = run_benchmark(detector, args.dataset, cfg.eval, name=args.name)
    args.report.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(args.report)
    text = report.to_text()
    args.report.with_suffix(".txt").write_text(text)
    print(text, end="")
    for s in report.skipped:
        print(f"skipped: {s}", file=sys.stderr)
    if report.num_pairs == 0:
        return 1
    return 2 if report.skipped else 0


def cmd_diagnose(args, cfg) -> int:
    from .evaluation import ModelDetector
    from .geometry import read_homography
    from .training import collect_diagnostics, emit_diagnostics, list_images, load_image
    from .visualize import match_visualize

    model, norm = _load_model(args.checkpoint)
    if args.mode == "histograms":
        paths = list_images(args.corpus)[:args.pairs]
        images = [load_image(p, cfg.train.resolution) for p in paths]
        seeds = [[cfg.train.seed, 104729, i] for i in range(len(images))]
        samples = collect_diagnostics(model, images, cfg.train.homography, cfg.train.photometric, seeds,
                                      cfg.train.correspond_eps, norm)
        for p in emit_diagnostics(samples, args.out):
            print(p)
        return 0
    ref = load_image(args.ref, cfg.eval.resolution)
    tgt = load_image(args.tgt, cfg.eval.resolution)
    h_gt = read_homography(args.homography) if args.homography else None
    canvas, est = match_visualize(ModelDetector(model, norm), ref, tgt, h_gt, cfg.eval.n_points,
                                  cfg.eval.nms_radius, cfg.eval.ransac_threshold, cfg.eval.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(args.out), canvas)
    if not est.success:
        print("homography estimation failed", file=sys.stderr)
    return 0


def cmd_export(args, cfg) -> int:
    from .evaluation import EvalReport, export_report

    try:
        reports = [EvalReport.load(p) for p in args.reports]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    table, machine = export_report(reports)
    print(table, end="")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(machine, indent=2))
    return 0


COMMANDS = {"train": cmd_train, "detect": cmd_detect, "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args), args.command)
    except (KeyError, ValueError, TypeError) as exc:
        parser.error(f"invalid configuration: {exc}")
    np.seterr(all="ignore")
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
