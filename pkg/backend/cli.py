"""
Command-line entry point

    python -m backend.cli run --config run.ini --set sae.steps=5000 --seed 3
    python -m backend.cli rank --output runs/seed3

One subcommand per pipeline stage, plus `run` for the whole sequence.
"""

import argparse
import logging
import sys
from typing import List, Optional

from backend.config import ENV_OUTPUT_ROOT, RunConfig, load_config
from backend.errors import ConfigError, StageError
from backend.pipeline import STAGES, Pipeline

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

STAGE_HELP = {
    "build": "construct the toy model and echo the config",
    "sample": "sample the labeled activation corpus",
    "train-sae": "train the TopK SAE on the corpus",
    "keywords": "extract (and curate) strategy keywords",
    "recall": "stage 1: logit-lens candidate recall",
    "rank": "stage 2: steering effectiveness ranking",
    "select": "pick the top features per strategy",
    "train-router": "train the bi-encoder strategy router",
    "correct": "run the error-correction arms",
    "report": "assemble report.json and summary.csv",
}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="INI config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--output", help=f"output directory (default: ${ENV_OUTPUT_ROOT} or ./runs)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--no-progress", action="store_true", help="disable training progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sae-steering",
        description="Identify, rank and route SAE strategy features on a planted toy model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _add_common(sub.add_parser(stage, help=STAGE_HELP[stage]))
    run = sub.add_parser("run", help="every stage in order, then the report")
    _add_common(run)
    run.add_argument("--resume", action="store_true", help="skip stages already completed with this config")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config, args.overrides) if args.config else RunConfig().with_overrides(args.overrides)
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.output is not None:
        run["output_dir"] = args.output
    if run:
        config = config.updated({"run": run})
    return config.validate()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

    try:
        config = resolve_config(args)
    except ConfigError as e:
        print("✗ Invalid configuration:")
        for problem in e.problems:
            print(f"   - {problem}")
        return 2

    print(f"Seed: {config.seed}   Output: {config.output_dir}")
    pipeline = Pipeline(config, progress=not args.no_progress)
    stages = list(STAGES) if args.command == "run" else [args.command]
    try:
        if args.command == "run":
            report = pipeline.run(resume=args.resume)
        else:
            report = pipeline.run(stages)
    except StageError as e:
        print(f"✗ {e}")
        return 1

    for n, stage in enumerate(stages, start=1):
        took = pipeline.timings.get(stage)
        status = f"{took:.2f}s" if took is not None else "skipped"
        print(f"Step {n}: {stage}  ✓ ({status})")
    if report is not None:
        print()
        print(f"Recall fraction:  {report.recall['stage1']['recall_fraction']:.4f}")
        for row in report.summary_rows():
            print(f"  {row['strategy']:<32} feature {row['feature_id']:>4}  "
                  f"alpha {row['alpha']:6.2f}  rate {row['success_rate']:.3f}")
        print(f"Correction rates: {report.correction['rates']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
