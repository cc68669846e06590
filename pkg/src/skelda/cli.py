"""Command-line entry point for the twin-experiment pipeline.

Subcommands: simulate-truth, observe, run-filter, make-dataset, train-rl,
infer-rl, evaluate, export-plots-data.  Exit codes: 0 success, 2 invalid
configuration, 3 numerical divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline, storage
from .config import ConfigError, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="experiment config file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", type=Path, required=True, help="run directory")
    parser.add_argument(
        "--forcing", choices=["homogeneous", "warm-pool"],
        help="forcing mode override",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelda",
        description="Constrained ensemble assimilation twin experiments on the "
        "stochastic skeleton model, with an ensemble-of-agents emulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-truth", help="generate the truth trajectory")
    _add_common(p)

    p = sub.add_parser("observe", help="generate lognormal activity observations")
    _add_common(p)
    p.add_argument("--truth", type=Path, help="directory holding truth.dnce")

    p = sub.add_parser("run-filter", help="cycle an ensemble filter")
    _add_common(p)
    p.add_argument("--method", choices=["enkf", "eakf", "cenkf"], required=True)
    p.add_argument("--truth", type=Path, help="directory holding truth and observations")

    p = sub.add_parser("make-dataset", help="extract training records from an archive")
    _add_common(p)
    p.add_argument("--run", type=Path, help="filter run directory")
    p.add_argument("--method", default="cenkf")

    p = sub.add_parser("train-rl", help="train the agent ensemble")
    _add_common(p)
    p.add_argument("--dataset", type=Path, help="training dataset CSV")
    p.add_argument("--no-constraint", action="store_true",
                   help="disable constraint enforcement (ablation)")
    p.add_argument("--resume", action="store_true",
                   help="continue training from existing checkpoints")

    p = sub.add_parser("infer-rl", help="run agent inference along the observations")
    _add_common(p)
    p.add_argument("--checkpoints", type=Path, help="checkpoint directory")
    p.add_argument("--filter-run", type=Path,
                   help="directory with the filter archive and observations")

    p = sub.add_parser("evaluate", help="skill scores against the truth")
    _add_common(p)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument(
        "--estimate", action="append", required=True, metavar="NAME=CSV",
        help="method name and mean/trajectory CSV (repeatable)",
    )
    p.add_argument(
        "--energies", action="append", metavar="NAME=CSV",
        help="member-energy CSV whose band occupancy goes into the summary",
    )

    p = sub.add_parser("export-plots-data", help="collect CSVs for the plot scripts")
    _add_common(p)
    p.add_argument("sources", nargs="+", type=Path)
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "forcing", None) is not None:
        overrides["forcing"] = args.forcing
    if args.config is not None:
        return load_config(args.config, overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items()})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "simulate-truth":
            pipeline.simulate_truth(config, args.out)
        elif args.command == "observe":
            pipeline.generate_observations(config, args.out, args.truth)
        elif args.command == "run-filter":
            pipeline.run_filter(config, args.out, args.method, args.truth)
        elif args.command == "make-dataset":
            pipeline.make_dataset(config, args.out, args.run, args.method)
        elif args.command == "train-rl":
            pipeline.train_rl(
                config, args.out, args.dataset,
                no_constraint=args.no_constraint, resume=args.resume,
            )
        elif args.command == "infer-rl":
            pipeline.infer_rl(
                config, args.out, args.checkpoints, args.filter_run
            )
        elif args.command == "evaluate":
            estimates = {}
            for item in args.estimate:
                if "=" not in item:
                    print(f"bad --estimate {item!r}: expected NAME=CSV", file=sys.stderr)
                    return EXIT_CONFIG
                name, _, path = item.partition("=")
                estimates[name] = Path(path)
            energies = {}
            for item in args.energies or []:
                name, _, path = item.partition("=")
                energies[name] = Path(path)
            pipeline.evaluate(config, args.out, args.truth, estimates, energies or None)
        elif args.command == "export-plots-data":
            pipeline.export_plots_data(config, args.out, args.sources)
    except pipeline.DivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except storage.StorageError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
