"""Two-stage Stackelberg game between the server and the selected clients.

The server (leader) announces a reward ``R_t``; every client (follower) picks
a zCDP budget ``rho_i`` maximizing

    U_i = rho_i / sum(rho) * R_t - phi1 * nu_i * rho_i - fixed_i,

which is a Tullock contest with linear costs. Its interior equilibrium is
``rho_i* = C_i R_t`` with

    C_i = (N-1) (sum(nu) - nu_i (N-1)) / (phi1 sum(nu)^2).

Substituting into the server's cost makes every round separable,
``A_t / R_t + (1-gamma) pi^(t-1) R_t``, minimized at
``R_t* = sqrt(A_t pi^(1-t) / (1-gamma))``.

A client whose ``C_i`` is nonpositive values privacy too highly to take part:
its budget is zero, and the constants are recomputed over the remaining
clients (dropping the largest valuation first until every ``C_i > 0``).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares

from .errors import DegenerateGameError, FitError

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class DropoutWarning(UserWarning):
    """A closed-form budget was negative and has been clamped to zero."""


@dataclass(frozen=True)
class GameInstance:
    """Constants of one game. Client order matches ``nu`` and ``shard_sizes``.

    ``fixed_costs`` holds each client's weighted data, computation, and
    communication cost; only ``phi1`` (the privacy-cost weight) shapes the
    equilibrium. ``nu_schedule`` optionally gives one valuation row per round.
    """

    nu: tuple[float, ...]
    shard_sizes: tuple[int, ...]
    T: int = 30
    gamma: float = 0.5
    pi: float = 0.9429
    phi1: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    C: float = 1.0
    d: int = 1
    V: float = 0.0
    fixed_costs: tuple[float, ...] | None = None
    nu_schedule: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "nu", tuple(float(v) for v in self.nu))
        object.__setattr__(self, "shard_sizes", tuple(int(s) for s in self.shard_sizes))
        n = len(self.nu)
        if n < 2:
            raise ValueError("the game needs N >= 2 clients")
        if len(self.shard_sizes) != n:
            raise ValueError("shard_sizes and nu differ in length")
        if any(not v > 0 for v in self.nu):
            raise ValueError("every privacy valuation nu_i must be > 0")
        if any(s < 1 for s in self.shard_sizes):
            raise ValueError("every shard size must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma out of (0,1)")
        if not 0 < self.pi <= 1:
            raise ValueError("pi out of (0,1]")
        if not self.phi1 > 0:
            raise ValueError("phi1 must be > 0")
        if not (self.beta > 0 and self.lam > 0 and self.C > 0):
            raise ValueError("beta, lambda and C must be > 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.V < 0:
            raise ValueError("V must be >= 0")
        if self.fixed_costs is None:
            object.__setattr__(self, "fixed_costs", (0.0,) * n)
        else:
            object.__setattr__(self, "fixed_costs", tuple(float(c) for c in self.fixed_costs))
            if len(self.fixed_costs) != n or any(c < 0 for c in self.fixed_costs):
                raise ValueError("fixed_costs must be N nonnegative values")
        if self.nu_schedule is not None:
            rows = tuple(tuple(float(v) for v in row) for row in self.nu_schedule)
            if len(rows) != self.T or any(len(r) != n for r in rows):
                raise ValueError("nu_schedule must have T rows of N valuations")
            if any(not v > 0 for r in rows for v in r):
                raise ValueError("scheduled valuations must be > 0")
            object.__setattr__(self, "nu_schedule", rows)

    @property
    def N(self) -> int:
        return len(self.nu)

    def valuations(self, t: int = 1) -> np.ndarray:
        if self.nu_schedule is None:
            return np.asarray(self.nu)
        return np.asarray(self.nu_schedule[t - 1])


@dataclass(frozen=True)
class EquilibriumRound:
    t: int
    reward: float
    budgets: tuple[float, ...]
    coefficients: tuple[float, ...]
    A_t: float
    active: tuple[bool, ...]

    @property
    def dropped(self) -> list[int]:
        return [i for i, a in enumerate(self.active) if not a]


@dataclass
class EquilibriumReport:
    t: int
    tol: float
    client_residuals: list[float]
    numeric_reward: float
    reward_residual: float
    best_responses: list[float] = field(default_factory=list)

    @property
    def clients_ok(self) -> list[bool]:
        return [r <= self.tol for r in self.client_residuals]

    @property
    def reward_ok(self) -> bool:
        return self.reward_residual <= self.tol

    @property
    def passed(self) -> bool:
        return all(self.clients_ok) and self.reward_ok

    @property
    def max_client_residual(self) -> float:
        return max(self.client_residuals)


# --------------------------------------------------------------------------
# Stage II: clients


def client_utility(i: int, rho_i: float, rho_others: Sequence[float], R_t: float,
                   g: GameInstance, t: int = 1) -> float:
    if rho_i < 0 or any(r < 0 for r in rho_others):
        raise ValueError("budgets must be >= 0")
    total = rho_i + math.fsum(rho_others)
    if total <= 0:
        raise DegenerateGameError("every budget in the round is zero")
    nu_i = g.valuations(t)[i]
    return rho_i / total * R_t - g.phi1 * nu_i * rho_i - g.fixed_costs[i]


def optimal_budget(i: int, R_t: float, g: GameInstance, t: int = 1) -> float:
    """Closed-form best budget of client ``i`` with all N clients taking part.

    A negative value is clamped to zero with a ``DropoutWarning``. Use
    ``equilibrium_budgets`` for the full dropout-aware profile.
    """
    if g.N < 2:
        raise ValueError("N must be >= 2")
    if R_t < 0:
        raise ValueError("R_t must be >= 0")
    nu = g.valuations(t)
    s, n = float(nu.sum()), g.N
    rho = R_t * (n - 1) / (g.phi1 * s) - R_t * nu[i] / g.phi1 * ((n - 1) / s) ** 2
    if rho < 0:
        warnings.warn(f"client {i} drops out (closed-form budget {rho:.3g})", DropoutWarning,
                      stacklevel=2)
        return 0.0
    return rho


def budget_coefficients(g: GameInstance, t: int = 1, *, allow_dropout: bool = True
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per-client ``C_i`` (zero for dropped clients) and the participation mask."""
    nu = g.valuations(t)
    active = np.ones(g.N, dtype=bool)
    while True:
        n, s = int(active.sum()), float(nu[active].sum())
        coef = np.where(active, (n - 1) * (s - nu * (n - 1)) / (g.phi1 * s * s), 0.0)
        bad = active & (coef <= 0)
        if not bad.any():
            return coef, active
        if not allow_dropout:
            raise DegenerateGameError(
                f"clients {np.flatnonzero(bad).tolist()} have nonpositive coefficients"
            )
        # The largest valuation always has the smallest coefficient.
        active[int(np.argmax(np.where(active, nu, -np.inf)))] = False


def equilibrium_budgets(R_t: float, g: GameInstance, t: int = 1) -> np.ndarray:
    if R_t < 0:
        raise ValueError("R_t must be >= 0")
    coef, _ = budget_coefficients(g, t)
    return R_t * coef


def golden_section_max(diff: Callable[[float, float], float], lo: float, hi: float,
                       tol: float, max_iter: int = 10_000) -> float:
    """Maximize a unimodal function on ``[lo, hi]`` to bracket width ``tol``.

    ``diff(x, y)`` returns ``f(x) - f(y)``; passing the difference rather than
    ``f`` lets callers evaluate it without cancellation on flat peaks.
    """
    a, b = float(lo), float(hi)
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if diff(c, d) > 0:
            b, d = d, c
            c = b - _INV_PHI * (b - a)
        else:
            a, c = c, d
            d = a + _INV_PHI * (b - a)
    return 0.5 * (a + b)


def best_response_oracle(i: int, rho_others: Sequence[float], R_t: float, g: GameInstance,
                         search_hi: float | None = None, tol: float = 1e-9, t: int = 1) -> float:
    """Numerically maximize client ``i``'s utility over ``[0, search_hi]``.

    The default bracket ``R_t / (phi1 nu_i)`` always contains the maximizer:
    beyond it the privacy cost alone exceeds the whole reward.
    """
    s = math.fsum(rho_others)
    if any(r < 0 for r in rho_others) or not s > 0:
        raise ValueError("rho_others must be nonnegative with a positive sum")
    if R_t < 0:
        raise ValueError("R_t must be >= 0")
    price = g.phi1 * g.valuations(t)[i]
    if search_hi is None:
        search_hi = max(R_t / price, 1.0)
    if not search_hi > 0:
        raise ValueError("search_hi must be > 0")

    def diff(x: float, y: float) -> float:
        # U(x) - U(y) in factored form; fixed costs cancel.
        return (x - y) * (R_t * s / ((x + s) * (y + s)) - price)

    return golden_section_max(diff, 0.0, search_hi, tol)


# --------------------------------------------------------------------------
# Stage I: server


def round_constants(t: int, g: GameInstance, *, allow_dropout: bool = True
                    ) -> tuple[np.ndarray, float, np.ndarray]:
    """``(C_i, A_t, active)`` for round ``t``; ``C_i`` is zero for dropped clients."""
    coef, active = budget_coefficients(g, t, allow_dropout=allow_dropout)
    n = int(active.sum())
    sizes = np.asarray(g.shard_sizes, dtype=np.float64)
    scale = 4.0 * g.d * g.gamma * g.beta * g.C**2 / (g.T**2 * g.lam**2 * n**2)
    A_t = scale * float(np.sum(1.0 / (coef[active] * sizes[active] ** 2)))
    return coef, A_t, active


def server_round_cost(R_t: float, t: int, g: GameInstance, *, allow_dropout: bool = True) -> float:
    """Reward-dependent part of the server's cost in round ``t`` at equilibrium budgets."""
    if not R_t > 0:
        raise ValueError("R_t must be > 0")
    _, A_t, _ = round_constants(t, g, allow_dropout=allow_dropout)
    return A_t / R_t + (1.0 - g.gamma) * g.pi ** (t - 1) * R_t


def optimal_reward(t: int, g: GameInstance, *, allow_dropout: bool = True) -> float:
    _, A_t, _ = round_constants(t, g, allow_dropout=allow_dropout)
    return math.sqrt(A_t * g.pi ** (1 - t) / (1.0 - g.gamma))


def solve_round(t: int, g: GameInstance) -> EquilibriumRound:
    coef, A_t, active = round_constants(t, g)
    reward = math.sqrt(A_t * g.pi ** (1 - t) / (1.0 - g.gamma))
    return EquilibriumRound(
        t=t,
        reward=reward,
        budgets=tuple(float(x) for x in reward * coef),
        coefficients=tuple(float(c) for c in coef),
        A_t=A_t,
        active=tuple(bool(a) for a in active),
    )


def _direct_round_cost(R: float, t: int, g: GameInstance) -> float:
    # Accuracy-loss and discounted-reward terms built from the budgets the
    # clients would choose under R; the V^2 constant does not move the argmin.
    budgets = equilibrium_budgets(R, g, t)
    active = budgets > 0
    n = int(active.sum())
    sizes = np.asarray(g.shard_sizes, dtype=np.float64)[active]
    noise = float(np.sum(2.0 * g.d * g.C**2 / (sizes**2 * budgets[active] * n**2)))
    return g.gamma * 2.0 * g.beta / (g.lam**2 * g.T**2) * noise + (1 - g.gamma) * g.pi ** (t - 1) * R


def numeric_optimal_reward(t: int, g: GameInstance, rel_tol: float = 1e-12) -> float:
    """Minimize the direct per-round server cost over R by golden-section in log R."""
    lo, hi = -30.0, 30.0
    while True:
        cost = lambda u: _direct_round_cost(math.exp(u), t, g)
        u = golden_section_max(lambda x, y: cost(y) - cost(x), lo, hi, rel_tol)
        # Widen the bracket if the minimum sits on an edge.
        if u - lo < 1.0:
            lo -= 30.0
        elif hi - u < 1.0:
            hi += 30.0
        else:
            return math.exp(u)


def verify_equilibrium(round: EquilibriumRound, g: GameInstance, tol: float = 1e-6) -> EquilibriumReport:
    """Check a round against independent numeric best responses.

    Client residuals are absolute budget gaps to the golden-section best
    response; the reward residual is relative to ``round.reward``.
    """
    budgets = list(round.budgets)
    responses, residuals = [], []
    for i in range(g.N):
        others = budgets[:i] + budgets[i + 1:]
        br = best_response_oracle(i, others, round.reward, g, t=round.t)
        responses.append(br)
        residuals.append(abs(br - budgets[i]))
    numeric = numeric_optimal_reward(round.t, g)
    return EquilibriumReport(
        t=round.t,
        tol=tol,
        client_residuals=residuals,
        numeric_reward=numeric,
        reward_residual=abs(numeric - round.reward) / round.reward,
        best_responses=responses,
    )


# --------------------------------------------------------------------------
# Budget -> accuracy curve and the admissible reward range


@dataclass(frozen=True)
class AccuracyModel:
    """Concave accuracy curve ``I1 - I2 exp(-I3 rho - I4)`` in the round budget."""

    I1: float
    I2: float
    I3: float
    I4: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.I1 <= 1:
            raise ValueError("I1 must lie in (0, 1]")
        if not (self.I2 > 0 and self.I3 > 0):
            raise ValueError("I2 and I3 must be > 0")

    def accuracy(self, rho):
        return self.I1 - self.I2 * np.exp(-self.I3 * np.asarray(rho, dtype=np.float64) - self.I4)

    def budget_for(self, eps: float) -> float:
        """Total budget at which the curve reaches ``eps`` (may be negative)."""
        if not eps < self.I1:
            raise ValueError(f"accuracy {eps} is unreachable (I1 = {self.I1})")
        return (math.log(self.I2 / (self.I1 - eps)) - self.I4) / self.I3


def fit_accuracy_model(points: Sequence[tuple[float, float]], *, restarts: int = 16,
                       seed: int = 0, shift: float = 0.0, max_residual: float = 0.05,
                       min_span: float = 1e-6) -> AccuracyModel:
    """Least-squares fit of the accuracy curve with random restarts.

    Only the product ``I2 exp(-I4)`` is identifiable, so ``I4`` is held at
    ``shift`` and ``I2`` absorbs the rest. Raises ``FitError`` when the best
    residual norm exceeds ``max_residual`` or the curve is flat over the data.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
        raise ValueError("need at least 4 (rho, accuracy) points")
    rho, acc = pts[:, 0], pts[:, 1]
    if np.unique(rho).size != rho.size:
        raise ValueError("rho values must be distinct")
    if np.any(acc <= 0) or np.any(acc >= 1):
        raise ValueError("accuracies must lie in (0, 1)")

    def residuals(theta: np.ndarray) -> np.ndarray:
        i1, k, i3 = theta
        return i1 - k * np.exp(-i3 * rho) - acc

    lower = np.array([1e-6, 1e-9, 1e-6])
    upper = np.array([1.0, 1e3, 1e3])
    rng = np.random.default_rng(seed)
    starts = [np.array([min(acc.max(), 1.0), max(acc.max() - acc.min(), 1e-3),
                        1.0 / max(float(np.median(rho)), 1e-6)])]
    for _ in range(restarts):
        starts.append(np.array([rng.uniform(0.05, 1.0), rng.uniform(1e-3, 2.0),
                                10.0 ** rng.uniform(-3, 2)]))

    best = None
    for x0 in starts:
        x0 = np.clip(x0, lower * (1 + 1e-9), upper * (1 - 1e-9))
        sol = least_squares(residuals, x0, bounds=(lower, upper), method="trf",
                            ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=5000)
        if best is None or sol.cost < best.cost:
            best = sol

    i1, k, i3 = (float(v) for v in best.x)
    norm = float(np.linalg.norm(best.fun))
    if norm > max_residual:
        raise FitError(f"residual norm {norm:.4g} exceeds {max_residual}")
    span = k * (math.exp(-i3 * rho.min()) - math.exp(-i3 * rho.max()))
    if not span > min_span:
        raise FitError("fitted curve is flat over the observed budgets")
    return AccuracyModel(i1, k * math.exp(shift), i3, shift)


def reward_range(model: AccuracyModel, eps_target: float, eps_max: float, g: GameInstance,
                 t: int = 1) -> tuple[float, float]:
    """Rewards whose equilibrium round budget reaches ``eps_target`` and ``eps_max``.

    With every client participating the round budget is
    ``R (N-1) / (phi1 sum(nu))``; in general it is ``R * sum(C_i)``. A target
    already met at zero budget gives a zero lower bound.
    """
    if not eps_target < model.I1:
        raise ValueError(f"eps_target {eps_target} is unreachable (I1 = {model.I1})")
    if not eps_target < eps_max < model.I1:
        raise ValueError("need eps_target < eps_max < I1")
    coef, _ = budget_coefficients(g, t)
    per_reward = float(coef.sum())
    lo = max(0.0, model.budget_for(eps_target)) / per_reward
    hi = max(0.0, model.budget_for(eps_max)) / per_reward
    return lo, hi
