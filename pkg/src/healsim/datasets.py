"""Task data: CSV ingestion, synthetic blobs, normalization, splitting and
IID partitioning across simulated nodes."""
import csv
import dataclasses
import os
import pathlib
from typing import Optional, Sequence

import numpy as np

from .datatypes import NodeId
from .exceptions import HealsimConfigError, HealsimParseError, HealsimPreconditionError
from .logging import getLogger

logger = getLogger(__name__)

DATA_DIR_ENV = 'HEALSIM_DATA_DIR'


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise HealsimConfigError(f'features must be a non-empty n x d matrix, got {features.shape}')
        if features.shape[0] != labels.shape[0]:
            raise HealsimConfigError(f'{features.shape[0]} feature rows but {labels.shape[0]} labels')
        if self.num_classes < 1:
            raise HealsimConfigError(f'num_classes must be positive, got {self.num_classes}')
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise HealsimConfigError(f'labels must lie in [0, {self.num_classes})')
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int] | np.ndarray) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def __len__(self) -> int:
        return self.n_samples

    def __repr__(self) -> str:
        return f'<Dataset n={self.n_samples} d={self.n_features} k={self.num_classes}>'


@dataclasses.dataclass(frozen=True, eq=False)
class DataShard:
    """Rows of a training set owned by one node."""
    owner: NodeId
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_dataset(cls, owner: NodeId, dataset: Dataset, indices: np.ndarray) -> 'DataShard':
        indices = np.asarray(indices, dtype=np.int64)
        return cls(owner, indices, dataset.features[indices], dataset.labels[indices])

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __repr__(self) -> str:
        return f'<DataShard owner={self.owner} rows={len(self)}>'


@dataclasses.dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, dataset: Dataset) -> Dataset:
        return Dataset((dataset.features - self.mean) / self.std, dataset.labels, dataset.num_classes)


def resolve_data_path(path: str | pathlib.Path) -> pathlib.Path:
    """Relative paths that do not exist are looked up under ``$HEALSIM_DATA_DIR``."""
    path = pathlib.Path(path)
    if path.is_absolute() or path.exists():
        return path
    data_dir = os.environ.get(DATA_DIR_ENV)
    if data_dir:
        return pathlib.Path(data_dir) / path
    return path


def _map_labels(raw: np.ndarray) -> tuple[np.ndarray, int]:
    # class index = rank among the distinct values; 0..k-1 maps onto itself
    values, labels = np.unique(raw, return_inverse=True)
    return labels.astype(np.int64), max(len(values), 2)


def load_csv(path: str | pathlib.Path, label_column: int = -1, header: bool = False) -> Dataset:
    path = resolve_data_path(path)
    rows: list[list[float]] = []
    width: Optional[int] = None
    with open(path, newline='', encoding='utf-8') as file:
        reader = csv.reader(file)
        for row_number, row in enumerate(reader, start=1):
            if header and row_number == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise HealsimParseError(f'{path}: expected {width} cells, found {len(row)}',
                                        row_number, len(row))
            values = []
            for column_number, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise HealsimParseError(f'{path}: non-numeric cell {cell!r}',
                                            row_number, column_number) from None
            rows.append(values)
    if not rows:
        raise HealsimPreconditionError(f'{path}: no data rows')
    if width < 2:
        raise HealsimParseError(f'{path}: need at least one feature and one label column', 1, width)
    table = np.array(rows, dtype=np.float64)
    label_index = label_column % width
    features = np.delete(table, label_index, axis=1)
    labels, num_classes = _map_labels(table[:, label_index])
    dataset = Dataset(features, labels, num_classes)
    logger.info('Loaded %s: %d rows, %d features, %d classes',
                path, dataset.n_samples, dataset.n_features, num_classes)
    return dataset


def _cluster_means(d: int, k: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    scale = separation / np.sqrt(2.0)
    if k <= d:
        # scaled simplex: every pair of means is exactly `separation` apart
        means = np.zeros((k, d))
        means[np.arange(k), np.arange(k)] = scale
        return means
    directions = rng.standard_normal((k, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * scale


def generate_synthetic(n: int, d: int, k: int, separation: float, seed: int) -> Dataset:
    """``k`` unit-variance Gaussian clusters with balanced class counts."""
    if k < 2 or n < k or d < 1:
        raise HealsimConfigError(f'need n >= k >= 2 and d >= 1, got n={n} d={d} k={k}')
    if separation < 0:
        raise HealsimConfigError(f'separation must be >= 0, got {separation}')
    rng = np.random.default_rng(seed)
    means = _cluster_means(d, k, separation, rng)
    labels = rng.permutation(np.arange(n) % k)
    features = means[labels] + rng.standard_normal((n, d))
    return Dataset(features, labels, k)


def normalize(dataset: Dataset) -> tuple[Dataset, Normalizer]:
    """Standardize every feature with the sample (n - 1) standard deviation.

    Constant features pass through unchanged.
    """
    if dataset.n_samples < 2:
        raise HealsimPreconditionError('normalize needs at least two rows')
    mean = dataset.features.mean(axis=0)
    std = dataset.features.std(axis=0, ddof=1)
    constant = ~(std > 0)
    mean = np.where(constant, 0.0, mean)
    std = np.where(constant, 1.0, std)
    normalizer = Normalizer(mean, std)
    return normalizer.apply(dataset), normalizer


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise HealsimConfigError(f'test_fraction must be in (0, 1), got {test_fraction}')
    n_test = int(round(dataset.n_samples * test_fraction))
    if n_test < 1 or n_test >= dataset.n_samples:
        raise HealsimConfigError(
            f'test_fraction {test_fraction} leaves an empty split of {dataset.n_samples} rows')
    order = np.random.default_rng(seed).permutation(dataset.n_samples)
    return dataset.subset(order[n_test:]), dataset.subset(order[:n_test])


def partition_iid(dataset: Dataset, n_nodes: int, seed: int,
                  owners: Optional[Sequence[NodeId]] = None) -> list[DataShard]:
    """Seeded shuffle then round-robin: shard sizes differ by at most one."""
    if n_nodes < 1:
        raise HealsimConfigError(f'n_nodes must be positive, got {n_nodes}')
    if dataset.n_samples < n_nodes:
        raise HealsimConfigError(f'cannot split {dataset.n_samples} rows over {n_nodes} nodes')
    owners = list(range(n_nodes)) if owners is None else list(owners)
    if len(owners) != n_nodes:
        raise HealsimConfigError(f'{len(owners)} owners given for {n_nodes} nodes')
    order = np.random.default_rng(seed).permutation(dataset.n_samples)
    return [DataShard.from_dataset(owner, dataset, order[i::n_nodes]) for i, owner in enumerate(owners)]


class ReservePool:
    """Held-back training rows handed to nodes that join during churn.

    Rows are dealt without replacement until the pool runs dry, then drawn
    with replacement.
    """

    def __init__(self, dataset: Dataset, seed: int) -> None:
        self.dataset = dataset
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(dataset.n_samples)
        self._cursor = 0
        self._warned = False

    @property
    def remaining(self) -> int:
        return self.dataset.n_samples - self._cursor

    def take(self, owner: NodeId, size: int) -> DataShard:
        size = max(1, size)
        if self.remaining >= size:
            indices = self._order[self._cursor:self._cursor + size]
            self._cursor += size
        else:
            if not self._warned:
                logger.warning('Churn reserve exhausted, resampling %d rows with replacement',
                               self.dataset.n_samples)
                self._warned = True
            indices = self._rng.integers(0, self.dataset.n_samples, size=size)
        return DataShard.from_dataset(owner, self.dataset, indices)
