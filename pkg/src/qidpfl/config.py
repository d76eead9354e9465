"""Experiment configuration: TOML parsing, defaults, and validation.

Every section and key is optional except ``[dataset]`` details for IDX runs
and ``experiment.strategies``. Unknown sections or keys are rejected. See
README.md for the full key reference.
"""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigParseError, ConfigValidationError
from .game import AccuracyModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STRATEGIES = ("fedavg", "fedavg_select", "fedavg_dp", "qi_dpfl", "max_select", "random_select")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 20
    per_class: int = 200
    separation: float = 3.0
    test_fraction: float = 0.2
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "dirichlet"
    concentration: float = 1.0
    clients: int = 10


@dataclass(frozen=True)
class SelectionBlock:
    threshold: float | None = None
    exclude_worst: int | None = None
    reference: tuple[float, ...] | None = None

    def resolved_threshold(self, distances) -> float:
        from .selection import threshold_excluding

        if self.exclude_worst is not None:
            return threshold_excluding(distances, self.exclude_worst)
        return 1.0 if self.threshold is None else self.threshold


@dataclass(frozen=True)
class GameBlock:
    gamma: float = 0.5
    pi: float = 0.9429
    phi: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0)
    nu: Any = 1.0
    nu_range: tuple[float, ...] | None = None
    cost_data: Any = 0.0
    cost_compute: Any = 0.0
    cost_comm: Any = 0.0
    beta: float = 1.0
    lam: float = 1.0
    clip: float = 1.0
    grad_bound: float = 1.0
    dim: int | None = None


@dataclass(frozen=True)
class RewardBlock:
    eps_target: float | None = None
    eps_max: float | None = None
    I1: float | None = None
    I2: float | None = None
    I3: float | None = None
    I4: float = 0.0
    calibrate_rhos: tuple[float, ...] | None = None
    fit_restarts: int = 16
    fit_max_residual: float = 0.05

    @property
    def accuracy_model(self) -> AccuracyModel | None:
        if self.I1 is None:
            return None
        return AccuracyModel(self.I1, self.I2, self.I3, self.I4)


@dataclass(frozen=True)
class TrainingBlock:
    local_epochs: int = 1
    learning_rate: float = 0.01
    lr_schedule: str = "constant"
    schedule_lambda: float = 1.0
    batch_size: int = 32
    rounds: int = 30
    l2: float = 1e-3
    update_mode: str = "delta"
    global_lr: float = 1.0
    aggregation: str = "uniform"


@dataclass(frozen=True)
class FedAvgDPBlock:
    rho: float | None = None


@dataclass(frozen=True)
class ExperimentBlock:
    strategies: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    master_seed: int = 0
    output_dir: str = "runs"
    workers: int = 1
    plots: bool = True
    verify_tol: float = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    selection: SelectionBlock = field(default_factory=SelectionBlock)
    game: GameBlock = field(default_factory=GameBlock)
    reward: RewardBlock = field(default_factory=RewardBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    fedavg_dp: FedAvgDPBlock = field(default_factory=FedAvgDPBlock)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)
    base_dir: str = "."

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some sections' fields overridden, e.g. ``replace(game={"gamma": 0.3})``."""
        updates = {}
        for name, values in sections.items():
            current = getattr(self, name)
            updates[name] = dataclasses.replace(current, **values) if isinstance(values, dict) else values
        cfg = dataclasses.replace(self, **updates)
        validate(cfg)
        return cfg


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "selection": SelectionBlock,
    "game": GameBlock,
    "reward": RewardBlock,
    "training": TrainingBlock,
    "fedavg_dp": FedAvgDPBlock,
    "experiment": ExperimentBlock,
}


def _coerce(value: Any, default: Any, path: str, freeform: bool = False) -> Any:
    # Types follow the dataclass defaults; None or Any fields accept numbers,
    # strings, or lists and are checked by `validate`.
    if freeform:
        return tuple(value) if isinstance(value, list) else value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigValidationError(path, "must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(path, "must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(path, "must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigValidationError(path, "must be a string")
        return value
    if isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, table: Any, prefix: str):
    if not isinstance(table, dict):
        raise ConfigValidationError(prefix, "must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigValidationError(f"{prefix}.{key}", "is not a recognised key")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        values[key] = _coerce(value, default, f"{prefix}.{key}", freeform=f.type == "Any")
    return cls(**values)


def config_from_dict(doc: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    sections = {}
    for name, table in doc.items():
        if name not in _SECTIONS:
            raise ConfigValidationError(name, "is not a recognised section")
        sections[name] = _build_section(_SECTIONS[name], table, name)
    cfg = ExperimentConfig(**sections, base_dir=str(base_dir))
    validate(cfg)
    return cfg


def parse_config_text(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        if line is None:
            m = re.search(r"line (\d+), column (\d+)", str(exc))
            if m:
                line, col = int(m.group(1)), int(m.group(2))
        msg = getattr(exc, "msg", None) or re.sub(r"\s*\(at line.*\)$", "", str(exc))
        raise ConfigParseError(msg, line, col) from exc
    return config_from_dict(doc, base_dir)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), base_dir=path.parent)


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigValidationError(path, message)


def _per_client(value: Any, clients: int, path: str, positive: bool) -> None:
    values = value if isinstance(value, tuple) else (value,)
    _check(all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values),
           path, "must be a number or a list of numbers")
    if isinstance(value, tuple):
        _check(len(value) == clients, path, f"needs one entry per client ({clients})")
    if positive:
        _check(all(v > 0 for v in values), path, "entries must be > 0")
    else:
        _check(all(v >= 0 for v in values), path, "entries must be >= 0")


def validate(cfg: ExperimentConfig) -> None:
    """Check every component invariant; raises ``ConfigValidationError``."""
    ds = cfg.dataset
    _check(ds.kind in ("synthetic", "idx"), "dataset.kind", "must be 'synthetic' or 'idx'")
    if ds.kind == "synthetic":
        _check(ds.classes >= 2, "dataset.classes", "must be >= 2")
        _check(ds.dim >= 1, "dataset.dim", "must be >= 1")
        _check(ds.per_class >= 1, "dataset.per_class", "must be >= 1")
        _check(ds.separation > 0, "dataset.separation", "must be > 0")
        _check(0 < ds.test_fraction < 1, "dataset.test_fraction", "out of (0,1)")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _check(isinstance(getattr(ds, key), str), f"dataset.{key}", "is required for idx datasets")

    p = cfg.partition
    _check(p.mode in ("iid", "dirichlet"), "partition.mode", "must be 'iid' or 'dirichlet'")
    _check(p.concentration > 0, "partition.concentration", "must be > 0")
    _check(p.clients >= 2, "partition.clients", "must be >= 2")

    s = cfg.selection
    _check(s.threshold is None or s.exclude_worst is None, "selection",
           "set either threshold or exclude_worst, not both")
    if s.threshold is not None:
        _check(isinstance(s.threshold, (int, float)) and s.threshold >= 0,
               "selection.threshold", "must be a number >= 0")
    if s.exclude_worst is not None:
        _check(isinstance(s.exclude_worst, int) and 0 <= s.exclude_worst <= p.clients - 2,
               "selection.exclude_worst", f"must be an integer in [0, {p.clients - 2}]")
    if s.reference is not None:
        ref = s.reference
        _check(isinstance(ref, tuple) and all(isinstance(v, (int, float)) and v >= 0 for v in ref)
               and abs(sum(ref) - 1) <= 1e-9, "selection.reference",
               "must be a list of nonnegative numbers summing to 1")
        if ds.kind == "synthetic":
            _check(len(ref) == ds.classes, "selection.reference", "needs one entry per class")

    g = cfg.game
    _check(0 < g.gamma < 1, "game.gamma", "out of (0,1)")
    _check(0 < g.pi <= 1, "game.pi", "out of (0,1]")
    _check(isinstance(g.phi, tuple) and len(g.phi) == 4
           and all(isinstance(v, (int, float)) and v >= 0 for v in g.phi),
           "game.phi", "must be four nonnegative numbers")
    _check(g.phi[0] > 0, "game.phi", "phi1 must be > 0")
    _check(g.nu_range is None or g.nu == 1.0, "game", "set either nu or nu_range, not both")
    if g.nu_range is not None:
        _check(len(g.nu_range) == 2 and 0 < g.nu_range[0] <= g.nu_range[1],
               "game.nu_range", "must be [low, high] with 0 < low <= high")
    else:
        _per_client(g.nu, p.clients, "game.nu", positive=True)
    for key in ("cost_data", "cost_compute", "cost_comm"):
        _per_client(getattr(g, key), p.clients, f"game.{key}", positive=False)
    _check(g.beta > 0, "game.beta", "must be > 0")
    _check(g.lam > 0, "game.lam", "must be > 0")
    _check(g.clip > 0, "game.clip", "must be > 0")
    _check(g.grad_bound >= 0, "game.grad_bound", "must be >= 0")
    _check(g.dim is None or (isinstance(g.dim, int) and g.dim >= 1), "game.dim", "must be an integer >= 1")

    t = cfg.training
    _check(t.local_epochs >= 1, "training.local_epochs", "must be >= 1")
    _check(0 <= t.learning_rate < 1, "training.learning_rate", "out of [0,1)")
    _check(t.lr_schedule in ("constant", "inverse_lambda_t"), "training.lr_schedule",
           "must be 'constant' or 'inverse_lambda_t'")
    _check(t.schedule_lambda > 0, "training.schedule_lambda", "must be > 0")
    _check(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    _check(t.rounds >= 1, "training.rounds", "must be >= 1")
    _check(t.l2 >= 0, "training.l2", "must be >= 0")
    _check(t.update_mode in ("delta", "gradient"), "training.update_mode", "must be 'delta' or 'gradient'")
    _check(t.global_lr > 0, "training.global_lr", "must be > 0")
    _check(t.aggregation in ("uniform", "size"), "training.aggregation", "must be 'uniform' or 'size'")

    e = cfg.experiment
    _check(len(e.strategies) >= 1, "experiment.strategies", "must list at least one strategy")
    for name in e.strategies:
        _check(name in STRATEGIES, "experiment.strategies", f"unknown strategy {name!r}")
    _check(len(set(e.strategies)) == len(e.strategies), "experiment.strategies", "has duplicates")
    _check(len(e.seeds) >= 1 and all(isinstance(x, int) and x >= 0 for x in e.seeds),
           "experiment.seeds", "must be a nonempty list of integers >= 0")
    _check(len(set(e.seeds)) == len(e.seeds), "experiment.seeds", "has duplicates")
    _check(e.master_seed >= 0, "experiment.master_seed", "must be >= 0")
    _check(e.workers >= 1, "experiment.workers", "must be >= 1")
    _check(e.verify_tol > 0, "experiment.verify_tol", "must be > 0")

    r = cfg.reward
    needs_range = any(name in ("max_select", "random_select") for name in e.strategies)
    given = [r.I1, r.I2, r.I3]
    _check(all(v is None for v in given) or all(isinstance(v, (int, float)) for v in given),
           "reward", "I1, I2 and I3 must be given together")
    if r.I1 is not None:
        try:
            r.accuracy_model
        except ValueError as exc:
            raise ConfigValidationError("reward", str(exc)) from None
    if r.calibrate_rhos is not None:
        _check(len(r.calibrate_rhos) >= 4 and all(isinstance(v, (int, float)) and v > 0 for v in r.calibrate_rhos)
               and len(set(r.calibrate_rhos)) == len(r.calibrate_rhos),
               "reward.calibrate_rhos", "needs at least 4 distinct positive budgets")
        _check(r.I1 is None, "reward", "set either I1..I4 or calibrate_rhos, not both")
    _check(r.fit_restarts >= 16, "reward.fit_restarts", "must be >= 16")
    if needs_range:
        _check(r.I1 is not None or r.calibrate_rhos is not None, "reward",
               "max_select/random_select need I1..I4 or calibrate_rhos")
        _check(isinstance(r.eps_target, (int, float)), "reward.eps_target", "is required")
        _check(isinstance(r.eps_max, (int, float)), "reward.eps_max", "is required")
        _check(r.eps_target < r.eps_max, "reward.eps_max", "must exceed eps_target")
        if r.I1 is not None:
            _check(r.eps_max < r.I1, "reward.eps_max", "must be below I1")

    if cfg.fedavg_dp.rho is not None:
        _check(isinstance(cfg.fedavg_dp.rho, (int, float)) and cfg.fedavg_dp.rho > 0,
               "fedavg_dp.rho", "must be > 0")
