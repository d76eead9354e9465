"""Randomized equilibrium checks against the numeric oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .game import (
    GameInstance,
    best_response_oracle,
    budget_coefficients,
    equilibrium_budgets,
    numeric_optimal_reward,
    solve_round,
)


def random_interior_instance(rng: np.random.Generator, *, n_range=(2, 10), nu_range=(0.1, 5.0),
                             phi_range=(0.1, 10.0), max_tries: int = 100_000) -> GameInstance:
    """Draw a game in which every client has a positive equilibrium budget.

    Valuations are drawn from a random sub-interval of ``nu_range`` and the
    draw is rejected unless ``nu_max (N-1) < sum(nu)``; large N needs nearly
    equal valuations, which plain uniform sampling almost never produces.
    """
    for _ in range(max_tries):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        a, b = np.sort(rng.uniform(*nu_range, size=2))
        nu = rng.uniform(a, b, size=n)
        if nu.max() * (n - 1) >= nu.sum():
            continue
        game = GameInstance(
            nu=tuple(nu),
            shard_sizes=tuple(int(s) for s in rng.integers(1, 500, size=n)),
            T=int(rng.integers(1, 50)),
            gamma=float(rng.uniform(0.05, 0.95)),
            pi=float(rng.uniform(0.8, 1.0)),
            phi1=float(rng.uniform(*phi_range)),
            beta=float(rng.uniform(0.1, 10.0)),
            lam=float(rng.uniform(0.01, 2.0)),
            C=float(rng.uniform(0.1, 5.0)),
            d=int(rng.integers(1, 1000)),
        )
        _, active = budget_coefficients(game)
        if active.all():
            return game
    raise RuntimeError("could not draw an interior instance")


@dataclass
class OracleSuiteResult:
    instances: int
    max_budget_error: float
    max_reward_rel_error: float
    budget_tol: float
    reward_tol: float

    @property
    def passed(self) -> bool:
        return self.max_budget_error <= self.budget_tol and self.max_reward_rel_error <= self.reward_tol


def oracle_suite(instances: int = 100, seed: int = 0, budget_tol: float = 1e-6,
                 reward_tol: float = 1e-6, reward_range=(0.1, 100.0)) -> OracleSuiteResult:
    """Closed-form budgets and rewards versus golden-section oracles."""
    rng = np.random.default_rng(seed)
    worst_budget = worst_reward = 0.0
    for _ in range(instances):
        game = random_interior_instance(rng)
        R = float(rng.uniform(*reward_range))
        budgets = equilibrium_budgets(R, game).tolist()
        for i in range(game.N):
            others = budgets[:i] + budgets[i + 1:]
            br = best_response_oracle(i, others, R, game)
            worst_budget = max(worst_budget, abs(br - budgets[i]))
        t = int(rng.integers(1, game.T + 1))
        closed = solve_round(t, game).reward
        numeric = numeric_optimal_reward(t, game)
        worst_reward = max(worst_reward, abs(numeric - closed) / closed)
    return OracleSuiteResult(instances, worst_budget, worst_reward, budget_tol, reward_tol)
