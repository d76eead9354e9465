"""End-to-end experiments for the six compared strategies.

Every strategy sees the same data, partition, and client ordering for a given
``(master_seed, seed)``; only the strategy-specific randomness (DP noise and
random rewards) is keyed by the strategy name as well.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data_synth import (
    Dataset,
    LabelDistribution,
    PartitionSpec,
    generate_synthetic,
    load_idx,
    partition,
    train_test_split,
)
from .errors import EmptySelectionError
from .fl_engine import (
    ModelShape,
    TrainConfig,
    aggregate,
    derive_seed,
    evaluate,
    global_step,
    local_update_message,
)
from .game import (
    AccuracyModel,
    EquilibriumReport,
    GameInstance,
    budget_coefficients,
    client_utility,
    equilibrium_budgets,
    fit_accuracy_model,
    reward_range,
    solve_round,
    verify_equilibrium,
)
from .privacy import BudgetLedger, NoiseCalibration
from .selection import ClientProfile, SelectionConfig, emd, select_clients

log = logging.getLogger(__name__)


class StrategyKind(str, Enum):
    FEDAVG = "fedavg"
    FEDAVG_SELECT = "fedavg_select"
    FEDAVG_DP = "fedavg_dp"
    QI_DPFL = "qi_dpfl"
    MAX_SELECT = "max_select"
    RANDOM_SELECT = "random_select"

    @property
    def selects(self) -> bool:
        return self not in (StrategyKind.FEDAVG, StrategyKind.FEDAVG_DP)

    @property
    def private(self) -> bool:
        return self not in (StrategyKind.FEDAVG, StrategyKind.FEDAVG_SELECT)

    @property
    def incentivized(self) -> bool:
        return self in (StrategyKind.QI_DPFL, StrategyKind.MAX_SELECT, StrategyKind.RANDOM_SELECT)


@dataclass
class RoundOutcome:
    """Metrics of one global round.

    Per-client maps are keyed by client id and cover the clients taking part
    in the strategy (the selected set, or everyone without selection).
    ``budgets``, ``variances`` and ``utilities`` stay empty for strategies
    without DP. ``accuracy_term`` and ``reward_term`` are this round's shares
    of the server cost.
    """

    t: int
    strategy: str
    seed: int
    selected: tuple[int, ...]
    reward: float
    accuracy: float
    loss: float
    accuracy_term: float
    reward_term: float
    shard_sizes: dict[int, int]
    budgets: dict[int, float] = field(default_factory=dict)
    variances: dict[int, float] = field(default_factory=dict)
    utilities: dict[int, float] = field(default_factory=dict)
    verification: EquilibriumReport | None = None

    @property
    def rho_total(self) -> float:
        return math.fsum(self.budgets.values())

    @property
    def participants(self) -> list[int]:
        if not self.budgets:
            return list(self.selected)
        return [c for c in self.selected if self.budgets[c] > 0]

    @property
    def server_cost(self) -> float:
        return self.accuracy_term + self.reward_term


@dataclass
class Scenario:
    """Data and clients shared by every strategy for one seed."""

    seed: int
    test: Dataset
    profiles: list[ClientProfile]
    shape: ModelShape
    reference: LabelDistribution
    threshold: float
    selected: list[int]

    def profile(self, client_id: int) -> ClientProfile:
        return self.profiles[client_id]


def _per_client_values(value, clients: int) -> np.ndarray:
    if isinstance(value, (tuple, list)):
        return np.asarray(value, dtype=np.float64)
    return np.full(clients, float(value))


def _resolve(base_dir: str, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base_dir) / p


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    master = cfg.experiment.master_seed
    if ds.kind == "idx":
        train = load_idx(_resolve(cfg.base_dir, ds.train_images), _resolve(cfg.base_dir, ds.train_labels))
        test = load_idx(_resolve(cfg.base_dir, ds.test_images), _resolve(cfg.base_dir, ds.test_labels),
                        class_count=train.class_count)
        return train, test
    data_seed = int(derive_seed(master, "data", seed).generate_state(1)[0])
    full = generate_synthetic(ds.classes, ds.dim, ds.per_class, ds.separation, data_seed)
    return train_test_split(full, ds.test_fraction, data_seed + 1)


def build_scenario(cfg: ExperimentConfig, seed: int) -> Scenario:
    train, test = load_data(cfg, seed)
    master = cfg.experiment.master_seed
    part_seed = int(derive_seed(master, "partition", seed).generate_state(1)[0])
    spec = PartitionSpec(cfg.partition.mode, cfg.partition.concentration, cfg.partition.clients, part_seed)
    shards = partition(train, spec)

    g = cfg.game
    H = len(shards)
    if g.nu_range is not None:
        rng = np.random.default_rng(derive_seed(master, "valuations", seed))
        nu = rng.uniform(g.nu_range[0], g.nu_range[1], size=H)
    else:
        nu = _per_client_values(g.nu, H)
    phi = g.phi
    fixed = (phi[1] * _per_client_values(g.cost_data, H)
             + phi[2] * _per_client_values(g.cost_compute, H)
             + phi[3] * _per_client_values(g.cost_comm, H))
    profiles = [ClientProfile(i, shard, float(nu[i]), float(fixed[i])) for i, shard in enumerate(shards)]

    if cfg.selection.reference is not None:
        reference = LabelDistribution(np.asarray(cfg.selection.reference))
    else:
        reference = LabelDistribution.uniform(train.class_count)
    distances = [emd(p.distribution, reference) for p in profiles]
    threshold = cfg.selection.resolved_threshold(distances)
    selected = select_clients(profiles, SelectionConfig(reference, threshold))
    return Scenario(seed, test, profiles, ModelShape.for_dataset(train), reference, threshold, selected)


def build_game(cfg: ExperimentConfig, scenario: Scenario, client_ids) -> GameInstance:
    g = cfg.game
    members = [scenario.profile(c) for c in client_ids]
    return GameInstance(
        nu=tuple(p.privacy_value for p in members),
        shard_sizes=tuple(p.shard.n_samples for p in members),
        T=cfg.training.rounds,
        gamma=g.gamma,
        pi=g.pi,
        phi1=g.phi[0],
        beta=g.beta,
        lam=g.lam,
        C=g.clip,
        d=g.dim if g.dim is not None else scenario.shape.dim,
        V=g.grad_bound,
        fixed_costs=tuple(p.fixed_cost for p in members),
    )


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        local_epochs=t.local_epochs,
        learning_rate=t.learning_rate,
        lr_schedule=t.lr_schedule,
        schedule_lambda=t.schedule_lambda,
        batch_size=t.batch_size,
        global_rounds=t.rounds,
        l2=t.l2,
        update_mode=t.update_mode,
    )


def accuracy_cost_term(game: GameInstance, budgets: dict[int, float] | None,
                       sizes: dict[int, int]) -> float:
    """This round's accuracy-loss share of the server cost.

    ``budgets=None`` means no noise is added. A participating client with a
    zero budget under DP makes the bound infinite.
    """
    scale = game.gamma * 2.0 * game.beta / (game.lam**2 * game.T**2)
    if budgets is None:
        return scale * game.V**2
    n = len(budgets)
    if n == 0 or any(r <= 0 for r in budgets.values()):
        return math.inf
    noise = math.fsum(2.0 * game.d * game.C**2 / (sizes[c] ** 2 * r * n * n) for c, r in budgets.items())
    return scale * (game.V**2 + noise)


def total_server_cost(outcomes: list[RoundOutcome], g: GameInstance) -> float:
    """Discounted reward plus accuracy-loss bound, recomputed from recorded budgets."""
    if not outcomes:
        raise ValueError("no outcomes")
    scale = g.gamma * 2.0 * g.beta / (g.lam**2 * g.T**2)
    bound = 0.0
    for o in outcomes:
        noise = 0.0
        if o.budgets:
            part = o.participants
            n = len(part)
            if n == 0:
                return math.inf
            for c in part:
                noise += 2.0 * g.d * g.C**2 / (o.shard_sizes[c] ** 2 * o.budgets[c] * n * n)
        bound += g.V**2 + noise
    rewards = math.fsum(g.pi ** (o.t - 1) * o.reward for o in outcomes)
    return scale * bound + (1.0 - g.gamma) * rewards


def calibrate_accuracy_model(cfg: ExperimentConfig, scenario: Scenario) -> AccuracyModel:
    """Fit the budget-to-accuracy curve from short DP runs at fixed round budgets."""
    if not scenario.selected:
        raise EmptySelectionError("no client passed the selection threshold")
    game = build_game(cfg, scenario, scenario.selected)
    per_reward = float(budget_coefficients(game)[0].sum())
    points = []
    for rho_total in cfg.reward.calibrate_rhos:
        R = rho_total / per_reward
        outcomes = _train(cfg, scenario, StrategyKind.QI_DPFL, scenario.selected, game,
                          rewards=[R] * cfg.training.rounds, tag=f"calibrate:{rho_total!r}")
        points.append((rho_total, min(max(outcomes[-1].accuracy, 1e-6), 1 - 1e-6)))
    log.info("calibration points: %s", points)
    return fit_accuracy_model(points, restarts=cfg.reward.fit_restarts, seed=scenario.seed,
                              shift=cfg.reward.I4, max_residual=cfg.reward.fit_max_residual)


def _train(cfg: ExperimentConfig, scenario: Scenario, kind: StrategyKind, members: list[int],
           game: GameInstance, *, rewards: list[float] | None = None, fixed_rho: float | None = None,
           tag: str | None = None, verify: bool = False) -> list[RoundOutcome]:
    master = cfg.experiment.master_seed
    tcfg = train_config(cfg)
    T = cfg.training.rounds
    clip_norm = cfg.game.clip if kind.private else math.inf
    sizes = {c: scenario.profile(c).shard.n_samples for c in members}
    noise_tag = tag or kind.value
    w = scenario.shape.zeros()
    outcomes = []
    for t in range(1, T + 1):
        R = 0.0
        budgets: dict[int, float] = {}
        report = None
        if kind.incentivized:
            R = rewards[t - 1]
            rho = equilibrium_budgets(R, game, t)
            budgets = {c: float(r) for c, r in zip(members, rho)}
            if verify:
                eq = solve_round(t, game)
                report = verify_equilibrium(eq, game, tol=cfg.experiment.verify_tol)
        elif kind.private:
            budgets = {c: fixed_rho for c in members}

        participants = [c for c in members if not budgets or budgets[c] > 0]
        variances = {}
        messages, weights = [], []
        for c in participants:
            shard = scenario.profile(c).shard
            sigma_sq = 0.0
            if budgets:
                cal = NoiseCalibration.for_budget(budgets[c], cfg.game.clip, shard.n_samples)
                sigma_sq = variances[c] = cal.sigma_sq
            sgd_seed = derive_seed(master, "sgd", scenario.seed, c, t)
            noise_seed = derive_seed(master, noise_tag, scenario.seed, "noise", c, t)
            messages.append(local_update_message(w, shard, tcfg, clip_norm, sigma_sq, sgd_seed,
                                                 noise_seed=noise_seed, round_index=t))
            weights.append(shard.n_samples if cfg.training.aggregation == "size" else 1.0)
        w = global_step(w, aggregate(messages, weights), cfg.training.global_lr, tcfg.update_mode)
        accuracy, loss = evaluate(w, scenario.test)

        utilities = {}
        if budgets:
            index = {c: k for k, c in enumerate(members)}
            for c in members:
                others = [budgets[o] for o in members if o != c]
                utilities[c] = client_utility(index[c], budgets[c], others, R, game, t)
        part_budgets = {c: budgets[c] for c in participants} if budgets else None
        outcomes.append(RoundOutcome(
            t=t,
            strategy=kind.value,
            seed=scenario.seed,
            selected=tuple(members),
            reward=R,
            accuracy=accuracy,
            loss=loss,
            accuracy_term=accuracy_cost_term(game, part_budgets, sizes),
            reward_term=(1.0 - game.gamma) * game.pi ** (t - 1) * R,
            shard_sizes=sizes,
            budgets=budgets,
            variances=variances,
            utilities=utilities,
            verification=report,
        ))
    return outcomes


def default_dp_budget(cfg: ExperimentConfig, scenario: Scenario) -> float:
    """Mean round-1 equilibrium budget of the selected clients."""
    if cfg.fedavg_dp.rho is not None:
        return cfg.fedavg_dp.rho
    if len(scenario.selected) < 2:
        raise EmptySelectionError("the default fedavg_dp budget needs >= 2 selected clients")
    eq = solve_round(1, build_game(cfg, scenario, scenario.selected))
    active = [b for b in eq.budgets if b > 0]
    return float(np.mean(active))


def run_experiment(strategy: StrategyKind | str, cfg: ExperimentConfig, seed: int,
                   scenario: Scenario | None = None, accuracy_model: AccuracyModel | None = None
                   ) -> list[RoundOutcome]:
    """Run one strategy for ``cfg.training.rounds`` rounds on seed ``seed``."""
    kind = StrategyKind(strategy)
    scenario = scenario or build_scenario(cfg, seed)
    members = scenario.selected if kind.selects else [p.client_id for p in scenario.profiles]
    if not members:
        raise EmptySelectionError(f"no client passed threshold {scenario.threshold:.4g}")
    if kind.incentivized and len(members) < 2:
        raise EmptySelectionError("the game needs at least 2 selected clients")
    log.info("%s seed=%d: %d of %d clients", kind.value, seed, len(members), len(scenario.profiles))

    game = build_game(cfg, scenario, members)
    T = cfg.training.rounds
    master = cfg.experiment.master_seed
    rewards = None
    fixed_rho = None
    if kind is StrategyKind.QI_DPFL:
        rewards = [solve_round(t, game).reward for t in range(1, T + 1)]
    elif kind in (StrategyKind.MAX_SELECT, StrategyKind.RANDOM_SELECT):
        model = accuracy_model or cfg.reward.accuracy_model or calibrate_accuracy_model(cfg, scenario)
        if not cfg.reward.eps_max < model.I1:
            raise ValueError(f"reward.eps_max {cfg.reward.eps_max} is not below fitted I1 {model.I1:.4g}")
        bounds = [reward_range(model, cfg.reward.eps_target, cfg.reward.eps_max, game, t)
                  for t in range(1, T + 1)]
        if kind is StrategyKind.MAX_SELECT:
            rewards = [hi for _, hi in bounds]
        else:
            rng = np.random.default_rng(derive_seed(master, kind.value, seed, "reward"))
            rewards = [float(rng.uniform(lo, hi)) for lo, hi in bounds]
        if any(r <= 0 for r in rewards):
            raise ValueError("the reward range collapses to zero; raise reward.eps_max")
    elif kind is StrategyKind.FEDAVG_DP:
        fixed_rho = default_dp_budget(cfg, scenario)

    return _train(cfg, scenario, kind, list(members), game, rewards=rewards, fixed_rho=fixed_rho,
                  verify=kind is StrategyKind.QI_DPFL)


def ledger_from_outcomes(outcomes: list[RoundOutcome]) -> BudgetLedger:
    ledger = BudgetLedger()
    for o in outcomes:
        ledger.compose(o.t, {c: r for c, r in o.budgets.items() if r > 0})
    return ledger
