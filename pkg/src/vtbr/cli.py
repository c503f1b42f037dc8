"""Command-line entry point: ``vtbr <subcommand> [--config toy.json] [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from vtbr import pipeline as P
from vtbr.config import bundled_config, load_config
from vtbr.errors import ConfigError

log = logging.getLogger("vtbr")

EXIT_OK, EXIT_STAGE, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(bundled_config()), help="JSON run config (default: bundled toy.json)")
    common.add_argument("--out", default=None, help="run directory (overrides config 'out')")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides config 'seed')")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vtbr", description="Caption pretraining and re-ID transfer on synthetic data.")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    sub.add_parser("gen-captions", parents=[common], help="sample attributes, caption, RS-select, build vocabulary")
    sub.add_parser("synth-data", parents=[common], help="render images and write split manifests")
    sub.add_parser("pretrain", parents=[common], help="bicaptioning pretraining on the source domain")

    ft = sub.add_parser("finetune", parents=[common], help="re-ID fine-tuning with CE + triplet loss")
    ft.add_argument("--init", default="checkpoint",
                    help="'checkpoint' (run's pretrain.ckpt), 'random', or a path to a checkpoint")
    ft.add_argument("--data", default=None, help="split manifest to train on (default: source domain)")
    ft.add_argument("--tag", default="finetune", help="name of the output checkpoint and log")

    ev = sub.add_parser("eval", parents=[common], help="mAP / CMC with camera-aware filtering")
    ev.add_argument("--model", default=None, help="re-ID checkpoint (default: ckpt/finetune.ckpt)")
    ev.add_argument("--data", default=None, help="split manifest for in-domain eval")
    ev.add_argument("--cross-domain", default=None, help="split manifest of a second domain")
    ev.add_argument("--saliency", type=_int_list, default=None, help="gallery indices to export saliency maps for")
    ev.add_argument("--tag", default="eval")

    sal = sub.add_parser("saliency", parents=[common], help="Grad-CAM maps of the caption log-probability")
    sal.add_argument("--model", default=None, help="pretraining checkpoint (default: ckpt/pretrain.ckpt)")
    sal.add_argument("--ids", type=_int_list, default=None, help="gallery indices (default: first eval.saliency_images)")

    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    return parser


def _load(args) -> tuple[dict, Path]:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    return cfg, Path(cfg["out"])


def _run_stage(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except P.StageError:
        raise
    except Exception as exc:
        raise P.StageError(name, exc) from exc


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg, out = _load(args)
    except ConfigError as exc:
        print(f"vtbr: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    P.set_determinism()

    cmd = args.command
    try:
        if cmd == "gen-captions":
            result = _run_stage(cmd, P.stage_gen_captions, cfg, out)
        elif cmd == "synth-data":
            result = _run_stage(cmd, P.stage_synth_data, cfg, out)
        elif cmd == "pretrain":
            result = _run_stage(cmd, P.stage_pretrain, cfg, out)
        elif cmd == "finetune":
            result = _run_stage(cmd, P.stage_finetune, cfg, out, init=args.init, data=args.data, tag=args.tag)
        elif cmd == "eval":
            result = _run_stage(cmd, P.stage_eval, cfg, out, model_path=args.model, data=args.data,
                                cross_domain=args.cross_domain, tag=args.tag)
            if args.saliency:
                result["saliency"] = _run_stage("saliency", P.stage_saliency, cfg, out, indices=args.saliency)
        elif cmd == "saliency":
            result = _run_stage(cmd, P.stage_saliency, cfg, out, model_path=args.model, indices=args.ids)
        else:
            P.prepare_run_dir(out)
            result = P.run_pipeline(cfg, out)
    except P.StageError as exc:
        print(f"vtbr: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
