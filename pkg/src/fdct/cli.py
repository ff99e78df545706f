"""``fdct generate|train|eval|baseline|ablate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import training
from .config import Config
from .data import generate
from .errors import FDCTError


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config(preset=args.preset)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg = Config({**cfg.values, key.strip(): value.strip()}, cfg.preset)
    if getattr(args, "data", None):
        cfg = cfg.replace(data__path=args.data)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text key=value config file")
    common.add_argument("--preset", default="desk", help="base preset when no --config is given")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="run seed (default: first of train.seeds)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded execution")
    common.add_argument("--overwrite", action="store_true", help="replace an existing checkpoint")
    common.add_argument("--data", help="dataset directory or manifest (overrides data.path)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fdct", description="Multi-sensor fusion classifier.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic paired dataset")
    sub.add_parser("train", parents=[common], help="train the fusion model")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=("train", "test", "val"))
    bl = sub.add_parser("baseline", parents=[common], help="train a single-modality baseline")
    bl.add_argument("--modality", required=True, choices=("visible", "infrared"))
    ab = sub.add_parser("ablate", parents=[common], help="loss ablation over several seeds")
    ab.add_argument("--seeds", help="comma-separated seeds (default: train.seeds)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        if args.command == "generate":
            spec = cfg.synth_spec()
            if args.seed is not None:
                spec = type(spec)(**{**spec.__dict__, "seed": args.seed})
            print(generate(spec, out))
        elif args.command == "train":
            r = training.cmd_train(cfg, out, args.seed, args.overwrite, args.deterministic,
                                   log_every=50 if args.verbose else 0)
            print(f"accuracy {r.report.accuracy:.4f}  ({r.seconds:.0f}s)")
        elif args.command == "eval":
            report = training.cmd_eval(args.checkpoint, args.split, out, args.data, args.deterministic)
            print(f"accuracy {report.accuracy:.4f}")
        elif args.command == "baseline":
            r = training.cmd_baseline(cfg, args.modality, out, args.seed, args.deterministic)
            print(f"accuracy {r.report.accuracy:.4f}  ({r.seconds:.0f}s)")
        elif args.command == "ablate":
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
            for row in training.cmd_ablate(cfg, out, seeds, args.deterministic):
                print(f"{row['config']:<10} {row['median_accuracy']:.4f}")
    except FDCTError as exc:
        print(f"fdct: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
