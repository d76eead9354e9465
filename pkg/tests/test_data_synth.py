from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qidpfl.data_synth import (
    Dataset,
    LabelDistribution,
    PartitionSpec,
    generate_synthetic,
    label_distribution,
    load_idx,
    partition,
    train_test_split,
)
from qidpfl.errors import IDXFormatError, IDXMismatchError
from qidpfl.selection import emd

from conftest import write_idx_images, write_idx_labels


def _rows(ds: Dataset) -> list[tuple]:
    return sorted(tuple(f) + (int(y),) for f, y in zip(ds.features, ds.labels))


class TestGenerateSynthetic:
    def test_two_class_balanced(self):
        ds = generate_synthetic(2, 2, 50, 4.0, 7)
        assert ds.n_samples == 100
        assert np.bincount(ds.labels).tolist() == [50, 50]

    def test_three_class_shape(self):
        ds = generate_synthetic(3, 5, 10, 2.0, 1)
        assert ds.n_samples == 30 and ds.class_count == 3 and ds.n_features == 5

    def test_same_seed_bit_identical(self):
        a = generate_synthetic(4, 3, 20, 1.5, 11)
        b = generate_synthetic(4, 3, 20, 1.5, 11)
        assert a.features.tobytes() == b.features.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_means_pairwise_separated(self):
        ds = generate_synthetic(5, 4, 4000, 3.0, 2)
        means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(5)])
        gaps = [np.linalg.norm(means[i] - means[j]) for i in range(5) for j in range(i + 1, 5)]
        # Sample means wobble by about 1/sqrt(4000) per coordinate.
        assert min(gaps) > 3.0 - 0.15

    @pytest.mark.parametrize("args", [(1, 2, 5, 1.0, 0), (2, 0, 5, 1.0, 0), (2, 2, 0, 1.0, 0), (2, 2, 5, 0.0, 0)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            generate_synthetic(*args)


class TestDataset:
    def test_rejects_label_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), np.array([0, 2]), 2)

    def test_rejects_row_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 1)), np.array([0, 1]), 2)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 1)), np.array([], dtype=int), 2)


class TestPartition:
    def test_iid_even_split(self):
        ds = generate_synthetic(2, 2, 50, 4.0, 0)
        shards = partition(ds, PartitionSpec("iid", 1.0, 4, 0))
        assert [s.n_samples for s in shards] == [25, 25, 25, 25]

    def test_iid_remainder_to_earliest(self):
        ds = generate_synthetic(2, 1, 5, 1.0, 0)
        shards = partition(ds, PartitionSpec("iid", 1.0, 3, 0))
        assert [s.n_samples for s in shards] == [4, 3, 3]

    def test_dirichlet_conserves_count(self):
        ds = generate_synthetic(2, 2, 50, 4.0, 0)
        shards = partition(ds, PartitionSpec("dirichlet", 1.0, 4, 123))
        assert sum(s.n_samples for s in shards) == 100

    def test_too_many_clients(self):
        ds = generate_synthetic(2, 1, 2, 1.0, 0)
        with pytest.raises(ValueError):
            partition(ds, PartitionSpec("iid", 1.0, 5, 0))

    def test_invalid_partition_settings(self):
        with pytest.raises(ValueError):
            PartitionSpec("dirichlet", 0.0, 4, 0)
        with pytest.raises(ValueError):
            PartitionSpec("dirichlet", 1.0, 1, 0)
        with pytest.raises(ValueError):
            PartitionSpec("shards", 1.0, 4, 0)

    def test_extreme_dirichlet_has_no_empty_shard(self):
        ds = generate_synthetic(2, 1, 10, 1.0, 0)
        for seed in range(30):
            shards = partition(ds, PartitionSpec("dirichlet", 0.01, 8, seed))
            assert all(s.n_samples >= 1 for s in shards)

    def test_small_alpha_more_heterogeneous(self):
        ds = generate_synthetic(2, 1, 100, 1.0, 0)
        uniform = LabelDistribution.uniform(2)

        def mean_emd(alpha: float) -> float:
            vals = []
            for seed in range(50):
                for s in partition(ds, PartitionSpec("dirichlet", alpha, 5, seed)):
                    vals.append(emd(label_distribution(s), uniform))
            return float(np.mean(vals))

        assert mean_emd(0.1) > mean_emd(100.0)

    @given(mode=st.sampled_from(["iid", "dirichlet"]), alpha=st.floats(0.05, 50.0),
           clients=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
    def test_conservation_and_determinism(self, mode, alpha, clients, seed):
        ds = generate_synthetic(3, 2, 15, 1.0, 5)
        spec = PartitionSpec(mode, alpha, clients, seed)
        shards = partition(ds, spec)
        assert len(shards) == clients
        merged = Dataset(np.concatenate([s.features for s in shards]),
                         np.concatenate([s.labels for s in shards]), 3)
        assert _rows(merged) == _rows(ds)
        again = partition(ds, spec)
        assert all(np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
                   for a, b in zip(shards, again))


class TestLabelDistribution:
    def test_balanced(self):
        ds = Dataset(np.zeros((4, 1)), np.array([0, 1, 0, 1]), 2)
        assert label_distribution(ds).probs.tolist() == [0.5, 0.5]

    def test_single_class(self):
        ds = Dataset(np.zeros((3, 1)), np.array([0, 0, 0]), 2)
        assert label_distribution(ds).probs.tolist() == [1.0, 0.0]

    def test_counts_three_one(self):
        ds = Dataset(np.zeros((4, 1)), np.array([0, 0, 1, 0]), 2)
        assert label_distribution(ds).probs.tolist() == [0.75, 0.25]

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            LabelDistribution(np.array([0.5, 0.6]))

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=200))
    def test_always_valid(self, labels):
        ds = Dataset(np.zeros((len(labels), 1)), np.array(labels), 7)
        p = label_distribution(ds).probs
        assert abs(p.sum() - 1) <= 1e-9 and np.all((p >= 0) & (p <= 1))


class TestSplit:
    def test_disjoint_union(self):
        ds = generate_synthetic(3, 2, 20, 1.0, 0)
        train, test = train_test_split(ds, 0.25, 3)
        assert train.n_samples + test.n_samples == 60
        merged = Dataset(np.concatenate([train.features, test.features]),
                         np.concatenate([train.labels, test.labels]), 3)
        assert _rows(merged) == _rows(ds)


class TestLoadIDX:
    def test_fixture(self, idx_fixture):
        img, lab, images, labels = idx_fixture
        ds = load_idx(img, lab)
        assert ds.n_samples == 4 and ds.n_features == 4
        assert ds.features[0].tolist() == pytest.approx([0.0, 1.0, 128 / 255, 64 / 255])
        assert ds.labels.tolist() == labels.tolist()
        assert ds.class_count == 3

    def test_pixel_255_is_one(self, idx_fixture):
        img, lab, *_ = idx_fixture
        assert load_idx(img, lab).features[1].tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_gzip(self, tmp_path):
        images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        img = write_idx_images(tmp_path / "i.gz", images, gz=True)
        lab = write_idx_labels(tmp_path / "l.gz", np.array([0, 1]), gz=True)
        assert load_idx(img, lab).n_samples == 2

    def test_truncated_header(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">II", 0x803, 4))
        lab = write_idx_labels(tmp_path / "l", np.array([0, 1, 0, 1]))
        with pytest.raises(IDXFormatError):
            load_idx(tmp_path / "i", lab)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x801, 1, 1, 1) + b"\x00")
        lab = write_idx_labels(tmp_path / "l", np.array([0]))
        with pytest.raises(IDXFormatError):
            load_idx(tmp_path / "i", lab)

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
        lab = write_idx_labels(tmp_path / "l", np.array([0, 1]))
        with pytest.raises(IDXFormatError):
            load_idx(tmp_path / "i", lab)

    def test_count_mismatch(self, tmp_path):
        img = write_idx_images(tmp_path / "i", np.zeros((3, 2, 2), dtype=np.uint8))
        lab = write_idx_labels(tmp_path / "l", np.array([0, 1]))
        with pytest.raises(IDXMismatchError):
            load_idx(img, lab)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_idx(tmp_path / "nope", tmp_path / "nope2")
