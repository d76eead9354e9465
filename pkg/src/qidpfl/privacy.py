"""Clipping, Gaussian perturbation under rho-zCDP, and budget accounting.

A client that clips its update to L2 norm ``C`` and averages over ``|D|``
samples has sensitivity ``2C/|D|``; the Gaussian mechanism with per-coordinate
variance ``sigma^2`` then satisfies ``rho``-zCDP for
``rho = sensitivity^2 / (2 sigma^2)``, so

    sigma^2 = 2 C^2 / (rho |D|^2).

Budgets compose additively across mechanisms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


def clip(v: np.ndarray, C: float) -> np.ndarray:
    """Scale ``v`` down so its L2 norm is at most ``C``."""
    if not C > 0:
        raise ValueError("clip threshold must be > 0")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= C:
        return v.copy()
    return v * (C / norm)


def sensitivity(C: float, shard_size: int) -> float:
    if not C > 0:
        raise ValueError("clip threshold must be > 0")
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    return 2.0 * C / shard_size


def noise_variance(rho: float, C: float, shard_size: int) -> float:
    if not rho > 0:
        raise ValueError("rho must be > 0")
    if not C > 0:
        raise ValueError("clip threshold must be > 0")
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    return 2.0 * C * C / (rho * shard_size * shard_size)


def perturb(v: np.ndarray, sigma_sq: float, seed) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma_sq)`` noise to every coordinate."""
    if sigma_sq < 0 or math.isnan(sigma_sq):
        raise ValueError("noise variance must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    if sigma_sq == 0:
        return v.copy()
    rng = np.random.default_rng(seed)
    return v + rng.normal(0.0, math.sqrt(sigma_sq), size=v.shape)


@dataclass(frozen=True)
class NoiseCalibration:
    clip: float
    shard_size: int
    rho: float
    sigma_sq: float

    @classmethod
    def for_budget(cls, rho: float, clip: float, shard_size: int) -> "NoiseCalibration":
        return cls(clip, shard_size, rho, noise_variance(rho, clip, shard_size))

    def is_consistent(self, rel_tol: float = 1e-12) -> bool:
        lhs = self.sigma_sq * self.rho * self.shard_size**2
        return math.isclose(lhs, 2.0 * self.clip**2, rel_tol=rel_tol)


@dataclass
class BudgetLedger:
    """Additive zCDP accounting per client and per round."""

    per_client_totals: dict[int, float] = field(default_factory=dict)
    per_round_totals: list[float] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)
    entries: list[tuple[int, int, float]] = field(default_factory=list)

    def compose(self, round: int, budgets: Mapping[int, float]) -> "BudgetLedger":
        if round in self.rounds:
            raise ValueError(f"round {round} already recorded")
        for client, rho in budgets.items():
            if not rho > 0:
                raise ValueError(f"client {client} budget {rho!r} is not > 0")
        # Sum in key order so the total does not depend on mapping order.
        items = sorted(budgets.items())
        for client, rho in items:
            self.per_client_totals[client] = self.per_client_totals.get(client, 0.0) + rho
            self.entries.append((round, client, rho))
        self.rounds.append(round)
        self.per_round_totals.append(math.fsum(rho for _, rho in items))
        return self

    def round_total(self, round: int) -> float:
        return self.per_round_totals[self.rounds.index(round)]

    def total(self) -> float:
        return math.fsum(self.per_round_totals)


def compose(ledger: BudgetLedger, round: int, budgets: Mapping[int, float]) -> BudgetLedger:
    return ledger.compose(round, budgets)


def g_squared(V: float, d: int, variances: Sequence[float], N: int) -> float:
    """Per-round bound on the expected squared norm of the noisy mean gradient."""
    if V < 0:
        raise ValueError("V must be >= 0")
    if d < 1 or N < 1:
        raise ValueError("d and N must be >= 1")
    variances = [float(s) for s in variances]
    if any(s < 0 for s in variances):
        raise ValueError("variances must be >= 0")
    return V * V + d / (N * N) * math.fsum(variances)


def accuracy_loss_bound(beta: float, G_sq: float, lam: float, T: int) -> float:
    if beta < 0 or G_sq < 0:
        raise ValueError("beta and G_sq must be >= 0")
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    return 2.0 * beta * G_sq / (lam * lam * T)
