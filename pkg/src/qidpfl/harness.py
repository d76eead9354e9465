"""Run (strategy, seed) cells and serialize their metrics.

Each cell writes ``<strategy>_seed<seed>.csv`` with one row per round. The
three ``server_cost_*`` columns are cumulative up to that round, so the last
row's ``server_cost_total`` equals :func:`total_server_cost` for the cell.
``server_cost_reward_term`` already carries the ``1 - gamma`` weight. Client
columns are empty for clients outside the strategy's participant set and for
strategies without the corresponding quantity.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .errors import EmptySelectionError, FitError
from .plots import BASE_COLUMNS, emit_plots
from .strategies import (
    RoundOutcome,
    StrategyKind,
    build_game,
    build_scenario,
    calibrate_accuracy_model,
    run_experiment,
    total_server_cost,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DEGRADED = 3


def csv_header(client_count: int) -> list[str]:
    cols = list(BASE_COLUMNS)
    for c in range(client_count):
        cols += [f"client_{c}_rho", f"client_{c}_utility"]
    return cols


def _num(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def outcomes_to_csv(outcomes: list[RoundOutcome], client_count: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(client_count))
    acc_cum = reward_cum = 0.0
    for o in outcomes:
        acc_cum += o.accuracy_term
        reward_cum += o.reward_term
        row = [o.t, o.strategy, o.seed, _num(o.accuracy), _num(o.loss), _num(o.reward),
               _num(o.rho_total) if o.budgets else "", _num(acc_cum), _num(reward_cum),
               _num(acc_cum + reward_cum)]
        for c in range(client_count):
            row += [_num(o.budgets.get(c)), _num(o.utilities.get(c))]
        writer.writerow(row)
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CellResult:
    strategy: str
    seed: int
    csv_path: str
    rounds: int
    selected: list[int]
    final_accuracy: float
    final_loss: float
    total_server_cost: float
    max_client_residual: float | None = None
    max_reward_residual: float | None = None
    degraded: bool = False
    accuracy_model: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "extra"}
        out.update(self.extra)
        if not math.isfinite(out["total_server_cost"]):
            out["total_server_cost"] = str(out["total_server_cost"])
        return out


def run_cell(cfg: ExperimentConfig, strategy: str, seed: int, out_dir: str | Path) -> CellResult:
    """Run one cell and write its CSV."""
    kind = StrategyKind(strategy)
    scenario = build_scenario(cfg, seed)
    model = None
    if kind in (StrategyKind.MAX_SELECT, StrategyKind.RANDOM_SELECT):
        model = cfg.reward.accuracy_model or calibrate_accuracy_model(cfg, scenario)
    outcomes = run_experiment(kind, cfg, seed, scenario=scenario, accuracy_model=model)
    game = build_game(cfg, scenario, list(outcomes[0].selected))
    path = Path(out_dir) / f"{kind.value}_seed{seed}.csv"
    write_atomic(path, outcomes_to_csv(outcomes, len(scenario.profiles)))

    result = CellResult(
        strategy=kind.value,
        seed=seed,
        csv_path=path.name,
        rounds=len(outcomes),
        selected=list(outcomes[0].selected),
        final_accuracy=outcomes[-1].accuracy,
        final_loss=outcomes[-1].loss,
        total_server_cost=total_server_cost(outcomes, game),
    )
    if model is not None:
        result.accuracy_model = {"I1": model.I1, "I2": model.I2, "I3": model.I3, "I4": model.I4}
    reports = [o.verification for o in outcomes if o.verification is not None]
    if reports:
        result.max_client_residual = max(r.max_client_residual for r in reports)
        result.max_reward_residual = max(r.reward_residual for r in reports)
        tol = cfg.experiment.verify_tol
        result.degraded = result.max_client_residual > tol or result.max_reward_residual > tol
    log.info("cell %s seed=%d: accuracy %.4f, cost %.6g", kind.value, seed,
             result.final_accuracy, result.total_server_cost)
    return result


def _cell_job(args) -> CellResult:
    cfg, strategy, seed, out_dir = args
    return run_cell(cfg, strategy, seed, out_dir)


@dataclass
class RunReport:
    exit_code: int
    cells: list[CellResult]
    summary_path: Path | None
    plot_paths: list[Path]
    errors: list[str]


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None) -> RunReport:
    """Execute every (strategy, seed) cell, then write ``summary.json`` and charts.

    Exit codes: 0 success, 1 a cell failed, 3 an equilibrium check exceeded
    ``experiment.verify_tol``.
    """
    out = Path(out_dir if out_dir is not None else Path(cfg.base_dir) / cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or cfg.experiment.workers
    jobs = [(cfg, s, seed, str(out)) for s in cfg.experiment.strategies for seed in cfg.experiment.seeds]

    cells: list[CellResult] = []
    errors: list[str] = []

    def record(job, fn):
        try:
            cells.append(fn())
        except (EmptySelectionError, FitError, ValueError, OSError) as exc:
            msg = f"{job[1]} seed={job[2]}: {type(exc).__name__}: {exc}"
            log.error(msg)
            errors.append(msg)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job, pool.submit(_cell_job, job)) for job in jobs]
            for job, fut in futures:
                record(job, fut.result)
    else:
        for job in jobs:
            record(job, lambda job=job: _cell_job(job))

    degraded = any(c.degraded for c in cells)
    summary = {
        "strategies": list(cfg.experiment.strategies),
        "seeds": list(cfg.experiment.seeds),
        "master_seed": cfg.experiment.master_seed,
        "rounds": cfg.training.rounds,
        "verify_tol": cfg.experiment.verify_tol,
        "degraded": degraded,
        "errors": errors,
        "cells": [c.to_json() for c in cells],
    }
    summary_path = out / "summary.json"
    write_atomic(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")

    plot_paths: list[Path] = []
    if cfg.experiment.plots and cells:
        plot_paths = emit_plots([out / c.csv_path for c in cells], out / "plots")

    code = EXIT_FAILED if errors else EXIT_DEGRADED if degraded else EXIT_OK
    return RunReport(code, cells, summary_path, plot_paths, errors)
