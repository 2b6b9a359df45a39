"""Command line front end.

  mlcl run <config.json> [--output-dir D] [--seeds 0,1,2] [--strategies a,b]
  mlcl report <output_dir>
  mlcl gen-stream <stream.json> <out.csv>

run executes every (strategy, seed) cell of the config and writes
summary.csv, curves.csv, records/*.json, and timings.csv. report rebuilds
summary.csv and curves.csv from the records of an earlier run. gen-stream
exports a generated stream as one manifest CSV per task.
"""

import argparse
import dataclasses
import json
import logging
import sys

from .errors import ConfigError
from .harness import ExperimentConfig, gen_stream, report, run_experiment


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _name_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlcl",
        description="Continual-learning benchmark on multi-label task streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (strategy, seed) cell of a JSON config")
    run.add_argument("config", help="path to the experiment config (JSON)")
    run.add_argument("--output-dir", help="override the config's output directory")
    run.add_argument("--seeds", type=_int_list, help="override seeds, e.g. 0,1,2")
    run.add_argument(
        "--strategies",
        type=_name_list,
        help="restrict to a comma-separated subset of the config's strategies",
    )

    rep = sub.add_parser("report", help="rebuild summary.csv and curves.csv from records")
    rep.add_argument("output_dir", help="directory holding records/ from an earlier run")

    gen = sub.add_parser("gen-stream", help="export a generated stream as task manifests")
    gen.add_argument("spec", help="JSON file with stream parameters (seed, sizes, ...)")
    gen.add_argument("out_csv", help="base path; task k lands at <stem>_task<k>.csv")
    return parser


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    if args.output_dir is not None:
        changes["output_dir"] = args.output_dir
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    if args.strategies is not None:
        known = {s.kind: s for s in config.strategies}
        missing = [name for name in args.strategies if name not in known]
        if missing:
            raise ConfigError(f"strategies {missing} are not in the config")
        changes["strategies"] = [known[name] for name in args.strategies]
    return dataclasses.replace(config, **changes) if changes else config


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = _apply_overrides(ExperimentConfig.from_json_file(args.config), args)
            result = run_experiment(config)
            print(result.table.format())
            print(f"wrote {len(result.written)} files under {config.output_dir}")
            for kind, seed, message in result.failures:
                print(f"FAILED cell ({kind}, seed {seed}): {message}", file=sys.stderr)
            return 0
        if args.command == "report":
            table = report(args.output_dir)
            print(table.format())
            return 0
        if args.command == "gen-stream":
            with open(args.spec, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            if not isinstance(doc, dict):
                raise ConfigError("stream spec must be a JSON object")
            for path in gen_stream(doc, args.out_csv):
                print(path)
            return 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
