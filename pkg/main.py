"""
Command-line entry point for the KMTL bandit harness.

Subcommands:
- run: seeded multi-run experiment, writes regret/summary CSVs
- diagnose: theory diagnostics suite, writes diagnostics.csv
- fetch-data: download datasets listed in the manifest
- info: registered policies, datasets and their availability

Exit codes: 0 success, 2 configuration error, 3 dataset error,
4 diagnostics failure.
"""

import argparse
import asyncio
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from bandit_policies import POLICY_NAMES
from data_fetcher import DatasetFetcher
from diagnostics import EXIT_DIAGNOSTICS_FAILED, run_diagnostics
from environments import DATASET_SHAPES
from errors import (
    ConfigurationError,
    DatasetParseError,
    DatasetValidationError,
    DiagnosticsFailure,
    DomainError,
    EnvironmentExhaustedError,
)
from experiment_config import ExperimentConfigFile
from experiment_runner import DATA_DIR_ENV_VAR, data_dir, load_manifest, run_experiment
from logging_config import setup_logging

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3

logger = setup_logging("kmtl_bandits")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kmtl-bandits", description="Kernelized multi-task contextual bandits")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a seeded multi-run experiment")
    run.add_argument("--config", help="JSON experiment config")
    run.add_argument("--env", help="synthetic-news, multiclass:<dataset> or a dataset name")
    run.add_argument("--policy", help="comma-separated policy names")
    run.add_argument("--T", type=int, help="horizon")
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", type=int)
    run.add_argument("--diagnostics", action="store_true", help="also check the spectral and regret bounds per run")

    diagnose = sub.add_parser("diagnose", help="run the theory diagnostics suite")
    diagnose.add_argument("--config", help="JSON experiment config")
    diagnose.add_argument("--seed", type=int)
    diagnose.add_argument("--out", help="output directory")

    fetch = sub.add_parser("fetch-data", help="download datasets listed in the manifest")
    fetch.add_argument("names", nargs="*", help="dataset names (default: all)")
    fetch.add_argument("--force", action="store_true", help="re-download files that already exist")

    sub.add_parser("info", help="list policies and datasets")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = {"env": "env", "policy": "policy", "T": "T", "runs": "runs", "seed": "seed",
            "lam": "lambda", "beta": "beta", "out": "out", "workers": "workers"}
    return {flag: getattr(args, attr) for attr, flag in keys.items() if hasattr(args, attr)}


def cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfigFile(args.config).load(_overrides(args))
    if args.diagnostics:
        config = config.model_copy(update={"diagnostics": True})
    result = run_experiment(config)
    if not result.diagnostics_passed:
        return EXIT_DIAGNOSTICS_FAILED
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    config = ExperimentConfigFile(args.config).load(_overrides(args))
    report = run_diagnostics(config)
    for record in report.failed:
        print(f"FAILED {record.name}: lhs={record.lhs:.6g} rhs={record.rhs:.6g} {record.detail}")
    return report.exit_code


def cmd_fetch(args: argparse.Namespace) -> int:
    fetcher = DatasetFetcher(load_manifest(), force=args.force)
    results = asyncio.run(fetcher.fetch(args.names))
    for result in results:
        print(f"{result.name:12s} {result.status:10s} {result.path} {result.detail}".rstrip())
    return EXIT_OK if all(r.ok for r in results) else EXIT_DATASET


def cmd_info(args: argparse.Namespace) -> int:
    print("Policies:")
    for name in POLICY_NAMES:
        print(f"  {name}")
    print("  fixed:<arm>")
    print("  kmtl-ucb-mu:<mu>")
    print(f"Datasets ({DATA_DIR_ENV_VAR}={data_dir()}):")
    manifest = load_manifest()
    for name, (n_classes, n_features) in DATASET_SHAPES.items():
        entry = manifest.get(name)
        available = entry is not None and Path(entry.path).exists()
        print(f"  {name:12s} N={n_classes:<3d} d={n_features:<4d} {'available' if available else 'missing'}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "diagnose": cmd_diagnose, "fetch-data": cmd_fetch, "info": cmd_info}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, DomainError, EnvironmentExhaustedError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except (DatasetParseError, DatasetValidationError) as e:
        logger.error("Dataset error: %s", e)
        return EXIT_DATASET
    except DiagnosticsFailure as e:
        logger.error("Diagnostics failure: %s", e)
        return EXIT_DIAGNOSTICS_FAILED


if __name__ == "__main__":
    sys.exit(main())
