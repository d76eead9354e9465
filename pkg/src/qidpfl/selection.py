"""Quality-aware client selection by label-distribution distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data_synth import Dataset, LabelDistribution, label_distribution
from .errors import DimensionMismatchError


@dataclass
class ClientProfile:
    """One simulated client.

    ``fixed_cost`` is the budget-independent part of the training cost
    (data, computation, and communication terms already weighted).
    """

    client_id: int
    shard: Dataset
    privacy_value: float = 1.0
    fixed_cost: float = 0.0
    distribution: LabelDistribution = field(init=False)

    def __post_init__(self) -> None:
        if not self.privacy_value > 0:
            raise ValueError("privacy_value must be > 0")
        if self.fixed_cost < 0:
            raise ValueError("fixed_cost must be >= 0")
        self.distribution = label_distribution(self.shard)


@dataclass(frozen=True)
class SelectionConfig:
    reference: LabelDistribution
    threshold: float

    def __post_init__(self) -> None:
        # Values above 2 (the largest possible distance) admit everyone.
        if not self.threshold >= 0:
            raise ValueError("threshold must be >= 0")


def _probs(dist: LabelDistribution | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(dist, LabelDistribution):
        return dist.probs
    return LabelDistribution(np.asarray(dist, dtype=np.float64)).probs


def emd(client_dist, reference) -> float:
    """Sum of absolute per-class frequency differences, in [0, 2]."""
    p, q = _probs(client_dist), _probs(reference)
    if p.shape != q.shape:
        raise DimensionMismatchError(f"{p.size} classes vs {q.size} classes")
    return float(np.abs(p - q).sum())


def select_clients(profiles: Iterable[ClientProfile], cfg: SelectionConfig) -> list[int]:
    """Ids of clients strictly below the threshold, in input order.

    An empty result is returned as-is; callers decide whether that is fatal.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no client profiles given")
    return [
        p.client_id for p in profiles if emd(p.distribution, cfg.reference) < cfg.threshold
    ]


def threshold_excluding(distances: Sequence[float], exclude: int) -> float:
    """A threshold that rejects exactly the ``exclude`` largest distances.

    Picks the midpoint between the last admitted and first rejected distance.
    Ties across that boundary make an exact split impossible and raise.
    """
    d = np.sort(np.asarray(distances, dtype=np.float64))
    if not 0 <= exclude < d.size:
        raise ValueError(f"cannot exclude {exclude} of {d.size} clients")
    if exclude == 0:
        return float(np.nextafter(d[-1], np.inf))
    lo, hi = d[d.size - exclude - 1], d[d.size - exclude]
    if not lo < hi:
        raise ValueError("distances tie at the exclusion boundary")
    return float(0.5 * (lo + hi))
