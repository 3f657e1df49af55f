"""Command-line entry point: ``kdro {eval,learn,experiment} ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import ExperimentConfig, from_ini, parse_bandwidth_rule, parse_list, preset
from .errors import ConfigError, DataError, KdroError, NumericalError
from .experiments import run_experiment, verify_cell, write_outputs

logger = logging.getLogger("kdro")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [experiment], [dgp] and [learner] sections")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--reps", type=int, help="number of replications")
    p.add_argument("--eta", help="comma-separated evaluation radii")
    p.add_argument("--eta-train", help="comma-separated training radii")
    p.add_argument("--n-train", help="comma-separated training sizes")
    p.add_argument("--n-test", type=int, help="test sample size")
    p.add_argument("--bandwidth", help="plugin, rot or fixed:<h>")
    p.add_argument("--kernel", choices=["epanechnikov", "gaussian"])
    p.add_argument("--discretize", help="comma-separated bin counts for the discretised baseline")
    p.add_argument("--policy", help="fixed policy parameters for eval (comma separated)")
    p.add_argument("--perturbations", type=int, help="number of KL-perturbed test sets")
    p.add_argument("--warfarin-csv", help="prepared covariate CSV for the warfarin study")
    p.add_argument("--out", help="output directory for CSV and text tables")
    p.add_argument("--threads", type=int, help="worker processes for replications")
    p.add_argument("--verify", action="store_true", help="re-run one random cell and require an identical value")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdro", description="Kernel-smoothed KL-robust policy evaluation and learning")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("eval", help="robust value of a fixed policy over replications"))
    _common(sub.add_parser("learn", help="learn robust policies and evaluate them on held-out data"))
    exp = sub.add_parser("experiment", help="run a named study end to end")
    exp.add_argument("name", choices=["table1", "table2", "table3", "warfarin"])
    _common(exp)
    return parser


def config_from_args(args) -> ExperimentConfig:
    name = args.name if args.command == "experiment" else args.command
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        cfg = from_ini(text, preset(name))
        if cfg.name != name:
            raise ConfigError(f"config file is for {cfg.name!r} but the command runs {name!r}")
    else:
        cfg = preset(name)
    changes = {}
    try:
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.reps is not None:
            changes["replications"] = args.reps
        if args.eta is not None:
            changes["eta_test"] = parse_list(args.eta)
        if args.eta_train is not None:
            changes["eta_train"] = parse_list(args.eta_train)
        if args.n_train is not None:
            changes["n_train"] = parse_list(args.n_train, int)
        if args.n_test is not None:
            changes["n_test"] = args.n_test
        if args.bandwidth is not None:
            changes["bandwidth"] = parse_bandwidth_rule(args.bandwidth)
        if args.kernel is not None:
            changes["kernel"] = args.kernel
        if args.discretize is not None:
            changes["discretize"] = parse_list(args.discretize, int)
        if args.policy is not None:
            changes["policy"] = parse_list(args.policy)
        if args.perturbations is not None:
            changes["perturbations"] = args.perturbations
        if args.warfarin_csv is not None:
            changes["warfarin_csv"] = args.warfarin_csv
        if args.threads is not None:
            changes["threads"] = args.threads
    except ValueError as exc:
        raise ConfigError(f"bad command-line value: {exc}") from None
    return cfg.replace(**changes) if changes else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        run = run_experiment(cfg)
        if args.verify:
            rep, key, value = verify_cell(run)
            print(f"verified replication {rep} cell {key}: {value!r}")
        if args.out:
            for path in write_outputs(run, args.out):
                logger.info("wrote %s", path)
        for rep in run.reports:
            print(rep.to_text(), end="")
            if rep.columns == ["value"]:
                print(rep.percentile_table(), end="")
        print(f"runtime {run.runtime_seconds:.1f} s")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KdroError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
