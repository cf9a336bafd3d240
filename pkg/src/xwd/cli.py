"""Command-line entry point: ``xwd <command> --config run.toml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ExperimentConfig
from .exceptions import ConfigInvalid, StageFailure, ValidationError, XWDError
from .orchestrator import STAGES, Experiment, make_phantom_series

EXIT_OK, EXIT_INVALID, EXIT_STAGE, EXIT_USAGE = 0, 1, 2, 64

COMMANDS = {
    "preprocess": ("preprocess",),
    "train-baselines": ("baselines",),
    "select-teacher": ("select_teacher",),
    "distill": ("distill",),
    "ensemble": ("ensemble",),
    "transfer": ("transfer",),
    "analyze": ("analyze",),
    "run-all": STAGES,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="xwd", description="Cross-window distillation experiments on CT volumes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in [*COMMANDS, "make-phantoms"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--output-dir", default=None, help="override output_dir")
        if name == "make-phantoms":
            p.add_argument("--target", default=None, help="directory for the series (default: <output_dir>/phantoms)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.output_dir:
            from dataclasses import replace

            cfg = replace(cfg, output_dir=args.output_dir)
        if args.command == "make-phantoms":
            written = make_phantom_series(cfg, args.target)
            print(f"wrote {len(written)} series")
            return EXIT_OK
        exp = Experiment(cfg)
        manifest = exp.run(COMMANDS[args.command])
    except (ConfigInvalid, ValidationError) as exc:
        print(f"xwd: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageFailure as exc:
        print(f"xwd: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except XWDError as exc:
        print(f"xwd: {exc}", file=sys.stderr)
        return EXIT_STAGE
    status = {s: manifest["stages"].get(s, {}).get("status", "pending") for s in STAGES}
    print(json.dumps({"output_dir": str(exp.root), "stages": status, "trained": [f"{k}/{w}" for k, w in exp.trained]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
