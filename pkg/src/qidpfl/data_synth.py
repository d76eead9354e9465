"""Datasets, client partitioning, label statistics, and the IDX reader.

Non-IID partitions follow the usual Dirichlet convention: for every class a
vector of client proportions is drawn from ``Dirichlet(alpha * 1)`` and the
class's samples are split accordingly. Small ``alpha`` concentrates each class
on a few clients.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import IDXFormatError, IDXMismatchError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled samples for a ``class_count``-way classification task."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be a 1-D integer array")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if features.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count - 1}]")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count)


@dataclass(frozen=True)
class PartitionSpec:
    mode: Literal["iid", "dirichlet"] = "dirichlet"
    concentration: float = 1.0
    client_count: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if not self.concentration > 0:
            raise ValueError("concentration must be > 0")
        if self.client_count < 2:
            raise ValueError("client_count must be >= 2")


@dataclass(frozen=True, eq=False)
class LabelDistribution:
    """Per-class label frequencies of one dataset."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("probs must be a nonempty vector")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("every probability must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, class_count: int) -> "LabelDistribution":
        return cls(np.full(class_count, 1.0 / class_count))

    @property
    def class_count(self) -> int:
        return int(self.probs.size)


def generate_synthetic(
    classes: int, dim: int, per_class: int, separation: float, seed: int
) -> Dataset:
    """Sample a balanced isotropic Gaussian mixture.

    Cluster means are drawn at random and then rescaled so the closest pair is
    exactly ``separation`` apart; each cluster has identity covariance.
    Samples are returned grouped by class.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if dim < 1 or per_class < 1:
        raise ValueError("dim and per_class must be >= 1")
    if not separation > 0:
        raise ValueError("separation must be > 0")

    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    closest = gaps[np.triu_indices(classes, k=1)].min()
    means *= separation / closest

    features = np.concatenate(
        [means[c] + rng.standard_normal((per_class, dim)) for c in range(classes)]
    )
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(features, labels, classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(ds.n_samples * test_fraction))
    if n_test < 1 or n_test >= ds.n_samples:
        raise ValueError("split leaves an empty train or test set")
    order = np.random.default_rng(seed).permutation(ds.n_samples)
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def partition_indices(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Assign every sample index to exactly one client.

    Returns one sorted index array per client. Every client receives at least
    one sample: an empty shard takes the highest index from the current
    largest shard.
    """
    n, k = ds.n_samples, spec.client_count
    if k > n:
        raise ValueError(f"cannot split {n} samples across {k} clients")
    rng = np.random.default_rng(spec.seed)

    if spec.mode == "iid":
        return [np.sort(part) for part in np.array_split(rng.permutation(n), k)]

    buckets: list[list[int]] = [[] for _ in range(k)]
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(k, spec.concentration))
        cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())

    shards = [sorted(b) for b in buckets]
    for client in range(k):
        if not shards[client]:
            donor = max(range(k), key=lambda j: (len(shards[j]), -j))
            shards[client].append(shards[donor].pop())
    return [np.asarray(s, dtype=np.int64) for s in shards]


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    return [ds.subset(idx) for idx in partition_indices(ds, spec)]


def label_distribution(ds: Dataset) -> LabelDistribution:
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    return LabelDistribution(counts / ds.n_samples)


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{what}: truncated header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IDXFormatError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) != expected:
        raise IDXFormatError(
            f"{what}: header declares {expected} bytes of data, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout, optionally gzipped).

    Pixels are scaled by 1/255 and each image is flattened row-major. When
    ``class_count`` is omitted it is taken as ``max(label) + 1``.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, class_count)
