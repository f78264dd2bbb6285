"""Command-line entry point: one subcommand per pipeline stage.

    retrivox <stage> --config retrivox.cfg [--seed N] [--mode M] [--k N] [--out DIR]

`write_config` emits a starter config (desk or mini profile) to edit.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import pipeline as P


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrivox",
        description="retrieval-augmented volumetric scene reconstruction pipeline")
    sub = parser.add_subparsers(dest="stage", required=True)

    def add_common(sp):
        sp.add_argument("--config", default="retrivox.cfg",
                        help="experiment config file (key=value sections)")
        sp.add_argument("--seed", type=int, default=None, help="override master seed")
        sp.add_argument("--mode", choices=("attention", "naive", "no_retrieval"),
                        default=None, help="override refinement mode")
        sp.add_argument("--k", type=int, default=None,
                        help="override retrieval count")
        sp.add_argument("--out", default=None, help="override output directory")

    for stage in P.STAGES:
        add_common(sub.add_parser(stage, help=f"run the {stage} stage"))

    wc = sub.add_parser("write_config", help="write a starter config file")
    wc.add_argument("--out", default="retrivox.cfg")
    wc.add_argument("--profile", choices=("desk", "mini"), default="desk")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.stage == "write_config":
        cfg = P.desk_config() if args.profile == "desk" else P.mini_config()
        P.save_config(cfg, args.out)
        print(f"wrote {args.profile} config to {args.out}")
        return 0

    cfg = P.load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.k is not None:
        overrides["hp"] = replace(cfg.hp, k=args.k)
    if overrides:
        cfg = replace(cfg, **overrides)

    try:
        result = P.run_stage(cfg, args.stage)
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"stage": args.stage, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
