"""Quality-aware incentive mechanism for differentially private federated learning.

A desk-scale simulator: EMD-based client selection, a Stackelberg game
between a reward-setting server and budget-choosing clients under zCDP, and
federated multinomial logistic regression with Gaussian-perturbed updates.
"""

from .config import ExperimentConfig, parse_config
from .game import GameInstance, optimal_reward, solve_round, verify_equilibrium
from .strategies import StrategyKind, run_experiment, total_server_cost

__all__ = [
    "ExperimentConfig",
    "GameInstance",
    "StrategyKind",
    "optimal_reward",
    "parse_config",
    "run_experiment",
    "solve_round",
    "total_server_cost",
    "verify_equilibrium",
]

__version__ = "0.1.0"
