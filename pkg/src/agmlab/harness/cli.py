"""Command-line entry point.

    agmlab <experiment> --config path.json [--seeds N] [--out dir]
                        [--override key=value ...]

Exit code is 0 iff every acceptance check in the run passes.  The worker-pool
size is capped by the AGMLAB_THREADS environment variable.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import EXPERIMENTS, ExperimentConfig
from .experiments import emit_outputs, run_experiment


def _parse_override(kv: str):
    if "=" not in kv:
        raise argparse.ArgumentTypeError(f"override must look like key=value, got {kv!r}")
    key, raw = kv.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agmlab",
        description="Adaptive-gradient implicit-sharpness laboratory")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="JSON experiment config", default=None)
    parser.add_argument("--seeds", type=int, default=None,
                        help="override the number of seeds")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--override", action="append", type=_parse_override,
                        default=[], metavar="KEY=VALUE",
                        help="dotted-path config override (value parsed as JSON)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config:
        config = ExperimentConfig.from_json(args.config)
        if config.experiment != args.experiment:
            print(f"config is for {config.experiment!r}, not {args.experiment!r}",
                  file=sys.stderr)
            return 2
    else:
        config = ExperimentConfig(experiment=args.experiment)
    if args.seeds is not None:
        config = config.with_override("n_seeds", args.seeds)
        config = config.with_override("seeds", None)
    for key, value in args.override:
        config = config.with_override(key, value)
    if args.out is not None:
        config = config.with_override("output_dir", args.out)

    summary = run_experiment(config)
    for name, ok in sorted(summary.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    if not summary.checks:
        print("(no acceptance checks configured for this run)")
    if config.output_dir:
        for path in emit_outputs(summary, config.output_dir):
            print(f"wrote {path}")
    else:
        print(json.dumps(summary.aggregates, indent=2, sort_keys=True, default=str))
    return 0 if summary.all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
