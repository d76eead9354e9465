"""Command-line entry point: ``qidpfl run|plot|verify``.

Log verbosity comes from the ``QIDPFL_LOG_LEVEL`` environment variable
(``WARNING`` by default).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from .config import parse_config
from .errors import ConfigParseError, ConfigValidationError, CSVSchemaError
from .harness import EXIT_CONFIG, EXIT_DEGRADED, EXIT_FAILED, EXIT_OK, run
from .plots import emit_plots
from .verification import oracle_suite

LOG_ENV = "QIDPFL_LOG_LEVEL"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qidpfl", description="Quality-aware incentive DP federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every (strategy, seed) cell of a config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (default: experiment.output_dir)")
    p_run.add_argument("--seed", type=int, help="run only this seed instead of experiment.seeds")
    p_run.add_argument("--workers", type=int, help="parallel cells (default: experiment.workers)")

    p_plot = sub.add_parser("plot", help="draw SVG charts from metrics CSVs")
    p_plot.add_argument("csv", nargs="+")
    p_plot.add_argument("--out", required=True)

    p_verify = sub.add_parser("verify", help="check closed-form equilibria against numeric oracles")
    p_verify.add_argument("config")
    p_verify.add_argument("--seed", type=int, help="oracle suite seed (default: experiment.master_seed)")
    p_verify.add_argument("--instances", type=int, default=100)
    return parser


def _load(path: str):
    try:
        return parse_config(path)
    except FileNotFoundError:
        print(f"error: config file not found: {path}", file=sys.stderr)
    except (ConfigParseError, ConfigValidationError) as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
    return None


def _cmd_run(args) -> int:
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    if args.seed is not None:
        if args.seed < 0:
            print("error: --seed must be >= 0", file=sys.stderr)
            return EXIT_CONFIG
        cfg = cfg.replace(experiment={"seeds": (args.seed,)})
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    report = run(cfg, args.out, args.workers)
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    for cell in report.cells:
        flag = " DEGRADED" if cell.degraded else ""
        print(f"{cell.strategy:<14} seed={cell.seed:<4} accuracy={cell.final_accuracy:.4f} "
              f"cost={cell.total_server_cost:.6g}{flag}")
    print(f"summary: {report.summary_path}")
    if report.exit_code == EXIT_DEGRADED:
        print("warning: equilibrium residuals exceeded experiment.verify_tol", file=sys.stderr)
    return report.exit_code


def _cmd_plot(args) -> int:
    try:
        paths = emit_plots(args.csv, args.out)
    except (CSVSchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_verify(args) -> int:
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    seed = cfg.experiment.master_seed if args.seed is None else args.seed
    tol = cfg.experiment.verify_tol
    start = time.perf_counter()
    result = oracle_suite(instances=args.instances, seed=seed, budget_tol=tol, reward_tol=tol)
    elapsed = time.perf_counter() - start
    print(f"instances: {result.instances}")
    print(f"max budget error: {result.max_budget_error:.3e} (tol {tol:g})")
    print(f"max reward relative error: {result.max_reward_rel_error:.3e} (tol {tol:g})")
    print(f"elapsed: {elapsed:.2f}s")
    print("PASS" if result.passed else "FAIL")
    return EXIT_OK if result.passed else EXIT_DEGRADED


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "plot": _cmd_plot, "verify": _cmd_verify}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
