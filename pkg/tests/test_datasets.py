import collections

import numpy as np
import pytest

from healsim.datasets import (Dataset, ReservePool, generate_synthetic, load_csv, normalize, partition_iid,
                              resolve_data_path, split_train_test)
from healsim.exceptions import HealsimConfigError, HealsimParseError, HealsimPreconditionError


def _rows(dataset: Dataset) -> collections.Counter:
    return collections.Counter((tuple(x), int(y)) for x, y in zip(dataset.features, dataset.labels))


def test_dataset_invariants():
    with pytest.raises(HealsimConfigError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(HealsimConfigError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(HealsimConfigError):
        Dataset(np.zeros((0, 2)), np.array([], dtype=int), 2)


def test_load_csv(tmp_path):
    path = tmp_path / 'tiny.csv'
    path.write_text('1,2,0\n3,4,1\n5,6,1\n', encoding='utf-8')
    dataset = load_csv(path)
    assert (dataset.n_samples, dataset.n_features, dataset.num_classes) == (3, 2, 2)
    assert dataset.labels.tolist() == [0, 1, 1]
    assert dataset.features.tolist() == [[1, 2], [3, 4], [5, 6]]


def test_load_csv_header_and_label_column(tmp_path):
    path = tmp_path / 'tiny.csv'
    path.write_text('label,a,b\n2,1,2\n0,3,4\n1,5,6\n', encoding='utf-8')
    dataset = load_csv(path, label_column=0, header=True)
    assert dataset.labels.tolist() == [2, 0, 1]
    assert dataset.num_classes == 3


def test_load_csv_maps_arbitrary_labels(tmp_path):
    path = tmp_path / 'tiny.csv'
    path.write_text('1,-1\n2,1\n3,-1\n', encoding='utf-8')
    assert load_csv(path).labels.tolist() == [0, 1, 0]


def test_load_csv_maps_labels_not_starting_at_zero(tmp_path):
    path = tmp_path / 'tiny.csv'
    path.write_text('1,2\n2,1\n3,2\n4,1\n', encoding='utf-8')
    dataset = load_csv(path)
    assert dataset.labels.tolist() == [1, 0, 1, 0]
    assert dataset.num_classes == 2


def test_load_csv_text_cell(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('1,2,0\n3,spam,1\n', encoding='utf-8')
    with pytest.raises(HealsimParseError, match="'spam'") as info:
        load_csv(path)
    assert (info.value.row, info.value.column) == (2, 2)


def test_load_csv_arity(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('1,2,0\n3,1\n', encoding='utf-8')
    with pytest.raises(HealsimParseError):
        load_csv(path)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_csv(tmp_path / 'missing.csv')


def test_load_csv_empty(tmp_path):
    path = tmp_path / 'empty.csv'
    path.write_text('\n', encoding='utf-8')
    with pytest.raises(HealsimPreconditionError):
        load_csv(path)


def test_resolve_data_path(tmp_path, monkeypatch):
    monkeypatch.setenv('HEALSIM_DATA_DIR', str(tmp_path))
    assert resolve_data_path('nowhere.csv') == tmp_path / 'nowhere.csv'
    assert resolve_data_path(tmp_path / 'x.csv') == tmp_path / 'x.csv'


def test_spambase_shape(spambase_path):
    dataset = load_csv(spambase_path)
    assert (dataset.n_samples, dataset.n_features, dataset.num_classes) == (4601, 57, 2)


def test_synthetic_is_deterministic():
    a = generate_synthetic(50, 3, 3, 4.0, seed=9)
    b = generate_synthetic(50, 3, 3, 4.0, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_balance():
    assert sorted(generate_synthetic(10, 4, 10, 3.0, seed=0).labels.tolist()) == list(range(10))
    counts = np.bincount(generate_synthetic(103, 4, 5, 3.0, seed=0).labels)
    assert counts.max() - counts.min() <= 1


def test_synthetic_errors():
    with pytest.raises(HealsimConfigError):
        generate_synthetic(5, 2, 10, 1.0, seed=0)
    with pytest.raises(HealsimConfigError):
        generate_synthetic(5, 2, 1, 1.0, seed=0)


def test_normalize_two_point_column():
    dataset = Dataset(np.array([[1.0, 5.0], [3.0, 5.0]]), np.array([0, 1]), 2)
    normalized, _ = normalize(dataset)
    np.testing.assert_allclose(normalized.features[:, 0], [-1 / np.sqrt(2), 1 / np.sqrt(2)])
    assert normalized.features[:, 1].tolist() == [5.0, 5.0]


def test_normalize_is_idempotent(blobs):
    once, _ = normalize(blobs)
    twice, _ = normalize(once)
    np.testing.assert_allclose(twice.features, once.features, atol=1e-12)


def test_normalize_ignores_rescaling(blobs):
    scale = np.array([0.5, 2.0, 10.0, 3.0, 0.1])
    rescaled = Dataset(blobs.features * scale, blobs.labels, blobs.num_classes)
    np.testing.assert_allclose(normalize(rescaled)[0].features, normalize(blobs)[0].features, atol=1e-9)


def test_normalizer_applies_train_statistics(blobs):
    train, test = split_train_test(blobs, 0.2, seed=0)
    train_n, normalizer = normalize(train)
    np.testing.assert_allclose(normalizer.apply(train).features, train_n.features)
    np.testing.assert_allclose(normalizer.apply(test).features, (test.features - normalizer.mean) / normalizer.std)
    with pytest.raises(HealsimPreconditionError):
        normalize(blobs.subset([0]))


def test_split_train_test(blobs):
    small = blobs.subset(np.arange(10))
    train, test = split_train_test(small, 0.2, seed=4)
    assert (train.n_samples, test.n_samples) == (8, 2)
    assert _rows(train) + _rows(test) == _rows(small)
    again, _ = split_train_test(small, 0.2, seed=4)
    assert np.array_equal(again.features, train.features)
    with pytest.raises(HealsimConfigError):
        split_train_test(small, 1.0, seed=0)
    with pytest.raises(HealsimConfigError):
        split_train_test(small, 0.01, seed=0)


def test_partition_sizes(blobs):
    assert {len(shard) for shard in partition_iid(blobs.subset(np.arange(100)), 100, seed=0)} == {1}
    sizes = sorted(len(shard) for shard in partition_iid(blobs.subset(np.arange(101)), 100, seed=0))
    assert sizes == [1] * 99 + [2]
    with pytest.raises(HealsimConfigError):
        partition_iid(blobs.subset(np.arange(5)), 6, seed=0)


def test_partition_owners(blobs):
    shards = partition_iid(blobs, 3, seed=0, owners=[7, 8, 9])
    assert [shard.owner for shard in shards] == [7, 8, 9]


def test_partition_is_disjoint_cover():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        n_nodes = int(rng.integers(1, n + 1))
        dataset = Dataset(rng.standard_normal((n, 2)), np.zeros(n, dtype=int), 1)
        shards = partition_iid(dataset, n_nodes, seed=int(rng.integers(1 << 30)))
        indices = np.concatenate([shard.indices for shard in shards])
        assert sorted(indices.tolist()) == list(range(n))
        sizes = [len(shard) for shard in shards]
        assert max(sizes) - min(sizes) <= 1


def test_reserve_pool_deals_then_resamples(blobs, caplog):
    pool = ReservePool(blobs.subset(np.arange(10)), seed=0)
    first = pool.take(100, 4)
    second = pool.take(101, 4)
    assert not set(first.indices.tolist()) & set(second.indices.tolist())
    assert pool.remaining == 2
    third = pool.take(102, 4)
    assert len(third) == 4
    assert 'exhausted' in caplog.text
