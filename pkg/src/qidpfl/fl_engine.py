"""Federated training of a multinomial logistic-regression model.

Parameters live in one flat vector: the ``n_classes x n_features`` weight
matrix in row-major order followed by ``n_classes`` biases. The training loss
is mean cross-entropy plus ``l2 / 2 * ||w||^2`` so the objective is strongly
convex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .data_synth import Dataset
from .errors import DimensionMismatchError
from .privacy import clip, perturb


@dataclass(frozen=True)
class ModelShape:
    n_features: int
    n_classes: int

    @property
    def dim(self) -> int:
        return self.n_classes * self.n_features + self.n_classes

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionMismatchError(f"parameter vector has shape {w.shape}, expected ({self.dim},)")
        split = self.n_classes * self.n_features
        return w[:split].reshape(self.n_classes, self.n_features), w[split:]

    @classmethod
    def for_dataset(cls, ds: Dataset) -> "ModelShape":
        return cls(ds.n_features, ds.class_count)


@dataclass(frozen=True)
class TrainConfig:
    """Local-training settings.

    ``lr_schedule="inverse_lambda_t"`` uses ``1 / (schedule_lambda * t)`` in
    round ``t`` instead of ``learning_rate``. ``update_mode`` decides what a
    client uploads: the parameter change (``"delta"``) or the equivalent
    pseudo-gradient ``(w_global - w_local) / eta`` (``"gradient"``).
    """

    local_epochs: int = 1
    learning_rate: float = 0.01
    lr_schedule: Literal["constant", "inverse_lambda_t"] = "constant"
    schedule_lambda: float = 1.0
    batch_size: int = 32
    global_rounds: int = 30
    l2: float = 1e-3
    update_mode: Literal["delta", "gradient"] = "delta"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not 0 <= self.learning_rate < 1:
            raise ValueError("learning_rate must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "inverse_lambda_t"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not self.schedule_lambda > 0:
            raise ValueError("schedule_lambda must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.global_rounds < 1:
            raise ValueError("global_rounds must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.update_mode not in ("delta", "gradient"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")

    def step_size(self, round_index: int = 1) -> float:
        if self.lr_schedule == "inverse_lambda_t":
            return 1.0 / (self.schedule_lambda * round_index)
        return self.learning_rate


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray, shape: ModelShape,
                  l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Regularized mean cross-entropy and its gradient with respect to ``w``."""
    W, b = shape.unpack(w)
    logp = _log_softmax(X @ W.T + b)
    n = X.shape[0]
    loss = -float(logp[np.arange(n), y].mean()) + 0.5 * l2 * float(w @ w)
    err = np.exp(logp)
    err[np.arange(n), y] -= 1.0
    err /= n
    grad = np.concatenate([(err.T @ X).ravel(), err.sum(axis=0)])
    return loss, grad + l2 * w


def local_sgd(w: np.ndarray, shard: Dataset, cfg: TrainConfig, *, seed=None,
              round_index: int = 1) -> np.ndarray:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD from ``w``.

    Batches are reshuffled every epoch from ``seed`` (default ``cfg.seed``).
    When one batch covers the whole shard the data order is left untouched.
    """
    if shard.n_samples < 1:
        raise ValueError("empty shard")
    shape = ModelShape.for_dataset(shard)
    w = np.array(w, dtype=np.float64)
    shape.unpack(w)
    eta = cfg.step_size(round_index)
    n = shard.n_samples
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    for _ in range(cfg.local_epochs):
        if cfg.batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n)
            batches = [order[k:k + cfg.batch_size] for k in range(0, n, cfg.batch_size)]
        for idx in batches:
            _, grad = loss_and_grad(w, shard.features[idx], shard.labels[idx], shape, cfg.l2)
            w -= eta * grad
    return w


def local_update_message(w_global: np.ndarray, shard: Dataset, cfg: TrainConfig, C: float,
                         sigma_sq: float, seed, *, noise_seed=None, round_index: int = 1
                         ) -> np.ndarray:
    """Train locally, clip the update to norm ``C``, and add Gaussian noise.

    ``seed`` drives the batch order and ``noise_seed`` the perturbation
    (derived from ``seed`` when omitted). ``C = inf`` disables clipping.
    """
    w_global = np.asarray(w_global, dtype=np.float64)
    w_local = local_sgd(w_global, shard, cfg, seed=seed, round_index=round_index)
    update = w_local - w_global
    if cfg.update_mode == "gradient":
        eta = cfg.step_size(round_index)
        if eta == 0:
            raise ValueError("gradient mode needs a nonzero step size")
        update = -update / eta
    if math.isfinite(C):
        update = clip(update, C)
    if noise_seed is None:
        noise_seed = np.random.SeedSequence(seed).spawn(1)[0]
    return perturb(update, sigma_sq, noise_seed)


def aggregate(messages: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted mean of client messages; equal weights when ``weights`` is None."""
    if len(messages) == 0:
        raise ValueError("no messages to aggregate")
    if len({np.shape(m) for m in messages}) != 1:
        raise DimensionMismatchError("messages differ in dimension")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in messages])
    if weights is None:
        weights = np.ones(len(messages))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(messages),):
        raise DimensionMismatchError("one weight per message is required")
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("weights must be >= 0 and not all zero")
    return (weights / weights.sum()) @ stack


def global_step(w_global: np.ndarray, aggregated: np.ndarray, eta_global: float = 1.0,
                mode: Literal["delta", "gradient"] = "delta") -> np.ndarray:
    w_global = np.asarray(w_global, dtype=np.float64)
    aggregated = np.asarray(aggregated, dtype=np.float64)
    if w_global.shape != aggregated.shape:
        raise DimensionMismatchError(f"{w_global.shape} vs {aggregated.shape}")
    if mode == "delta":
        return w_global + eta_global * aggregated
    if mode == "gradient":
        return w_global - eta_global * aggregated
    raise ValueError(f"unknown mode {mode!r}")


def evaluate(w: np.ndarray, test: Dataset) -> tuple[float, float]:
    """Accuracy (argmax, ties to the lowest class) and mean log-loss."""
    if test.n_samples < 1:
        raise ValueError("empty test set")
    shape = ModelShape.for_dataset(test)
    W, b = shape.unpack(w)
    logp = _log_softmax(test.features @ W.T + b)
    accuracy = float(np.mean(np.argmax(logp, axis=1) == test.labels))
    loss = -float(logp[np.arange(test.n_samples), test.labels].mean())
    return accuracy, loss


def derive_seed(*parts) -> np.random.SeedSequence:
    """Stable seed from a tuple of ints and strings (strings hashed by bytes)."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.extend(p.encode())
            entropy.append(256)
        else:
            entropy.append(int(p))
    return np.random.SeedSequence(entropy)
