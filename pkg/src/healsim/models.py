"""Logistic models stored as flat parameter vectors.

Every protocol exchanges and averages ``ModelParams``. Parameters are laid out
as a ``(outputs, input_dim + 1)`` row-major matrix, bias in the last column;
binary models have a single output row.
"""
import dataclasses
import enum
from typing import Optional, Protocol, Sequence

import numpy as np

from .exceptions import HealsimConfigError, HealsimPreconditionError, HealsimShapeError

INIT_SCALE = 0.05


class ModelKind(str, enum.Enum):
    BINARY = 'binary-logistic'
    MULTINOMIAL = 'multinomial-logistic'


class LabelledData(Protocol):
    features: np.ndarray
    labels: np.ndarray


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    num_classes: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, 'kind', ModelKind(self.kind))
        if self.input_dim < 1:
            raise HealsimConfigError(f'input_dim must be positive, got {self.input_dim}')
        if self.num_classes < 1:
            raise HealsimConfigError(f'num_classes must be positive, got {self.num_classes}')
        if self.kind is ModelKind.MULTINOMIAL and self.num_classes < 2:
            raise HealsimConfigError('multinomial-logistic needs num_classes >= 2')

    @property
    def outputs(self) -> int:
        return 1 if self.kind is ModelKind.BINARY else self.num_classes

    @property
    def param_count(self) -> int:
        return (self.input_dim + 1) * self.outputs

    @classmethod
    def for_data(cls, input_dim: int, num_classes: int, kind: Optional[str] = None) -> 'ModelSpec':
        """Pick the logistic family for a dataset; ``kind=None`` or ``'auto'``
        means binary for two classes, multinomial otherwise."""
        if kind in (None, 'auto'):
            kind = ModelKind.BINARY if num_classes <= 2 else ModelKind.MULTINOMIAL
        kind = ModelKind(kind)
        if kind is ModelKind.BINARY:
            if num_classes > 2:
                raise HealsimConfigError(f'binary-logistic cannot fit {num_classes} classes')
            return cls(kind, input_dim, 1)
        return cls(kind, input_dim, num_classes)


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams:
    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.shape[0] != self.spec.param_count:
            raise HealsimShapeError(
                f'expected {self.spec.param_count} parameters for {self.spec}, got {values.shape[0]}')
        values.flags.writeable = False
        object.__setattr__(self, 'values', values)

    @property
    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.spec.outputs, self.spec.input_dim + 1)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __repr__(self) -> str:
        return f'<ModelParams {self.spec.kind.value} d={self.spec.input_dim} k={self.spec.outputs}>'


@dataclasses.dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.1
    weight_decay: float = 0.01
    # None trains on the whole shard in one step
    batch_size: Optional[int] = None

    def __post_init__(self) -> None:
        if self.batch_size == 'full':
            object.__setattr__(self, 'batch_size', None)
        # 0 freezes training; experiment configs require a positive rate
        if not self.learning_rate >= 0:
            raise HealsimConfigError(f'learning_rate must be >= 0, got {self.learning_rate}')
        if self.weight_decay < 0:
            raise HealsimConfigError(f'weight_decay must be >= 0, got {self.weight_decay}')
        if self.batch_size is not None and self.batch_size < 1:
            raise HealsimConfigError(f'batch_size must be positive or "full", got {self.batch_size}')


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(spec, rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.param_count))


def _augment(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def _check_data(spec: ModelSpec, data: LabelledData) -> None:
    if data.features.ndim != 2 or data.features.shape[1] != spec.input_dim:
        raise HealsimShapeError(
            f'model expects {spec.input_dim} features, data has shape {data.features.shape}')
    if data.features.shape[0] == 0:
        raise HealsimPreconditionError('data is empty')


def _scores(matrix: np.ndarray, x_aug: np.ndarray) -> np.ndarray:
    return x_aug @ matrix.T


def _loss_and_gradient(spec: ModelSpec, matrix: np.ndarray, x_aug: np.ndarray,
                       labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the rows and its gradient, without weight decay."""
    m = x_aug.shape[0]
    z = _scores(matrix, x_aug)
    if spec.kind is ModelKind.BINARY:
        z = z[:, 0]
        y = labels.astype(np.float64)
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = ((p - y) @ x_aug / m)[np.newaxis, :]
        return loss, grad
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    onehot = np.zeros_like(z)
    onehot[np.arange(m), labels] = 1.0
    loss = float(-np.mean(np.sum(onehot * log_p, axis=1)))
    grad = (np.exp(log_p) - onehot).T @ x_aug / m
    return loss, grad


def loss(params: ModelParams, data: LabelledData, weight_decay: float = 0.0) -> float:
    """Mean cross-entropy plus ``weight_decay / 2 * ||params||^2``."""
    _check_data(params.spec, data)
    value, _ = _loss_and_gradient(params.spec, params.matrix, _augment(data.features), data.labels)
    return value + 0.5 * weight_decay * float(params.values @ params.values)


def gradient(params: ModelParams, data: LabelledData, weight_decay: float = 0.0) -> np.ndarray:
    """Flat gradient of :func:`loss` over all rows of ``data``."""
    _check_data(params.spec, data)
    _, grad = _loss_and_gradient(params.spec, params.matrix, _augment(data.features), data.labels)
    return grad.reshape(-1) + weight_decay * params.values


def train_step(params: ModelParams, shard: LabelledData, hyper: Hyperparams,
               rng: Optional[np.random.Generator] = None) -> ModelParams:
    """One local epoch of SGD on ``shard``.

    A full-batch epoch is a single gradient step and draws nothing from ``rng``.
    """
    spec = params.spec
    _check_data(spec, shard)
    x_aug = _augment(shard.features)
    labels = shard.labels
    n = x_aug.shape[0]
    values = params.values.copy()
    if hyper.batch_size is None or hyper.batch_size >= n:
        batches = [slice(None)]
    else:
        if rng is None:
            raise HealsimPreconditionError('mini-batch training needs a random stream')
        order = rng.permutation(n)
        batches = [order[i:i + hyper.batch_size] for i in range(0, n, hyper.batch_size)]
    for batch in batches:
        matrix = values.reshape(spec.outputs, spec.input_dim + 1)
        _, grad = _loss_and_gradient(spec, matrix, x_aug[batch], labels[batch])
        values = values - hyper.learning_rate * (grad.reshape(-1) + hyper.weight_decay * values)
    return ModelParams(spec, values)


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    if features.ndim != 2 or features.shape[1] != params.spec.input_dim:
        raise HealsimShapeError(
            f'model expects {params.spec.input_dim} features, data has shape {features.shape}')
    z = _scores(params.matrix, _augment(features))
    if params.spec.kind is ModelKind.BINARY:
        # sigmoid(z) > 0.5 exactly when z > 0; a score of 0.5 predicts class 0
        return (z[:, 0] > 0).astype(np.int64)
    return np.argmax(z, axis=1)


def evaluate(params: ModelParams, test: LabelledData) -> float:
    _check_data(params.spec, test)
    return float(np.mean(predict(params, test.features) == test.labels))


def _check_same_spec(models: Sequence[ModelParams]) -> ModelSpec:
    if not models:
        raise HealsimPreconditionError('cannot average an empty list of models')
    spec = models[0].spec
    for model in models[1:]:
        if model.spec != spec:
            raise HealsimShapeError(f'cannot average {model.spec} with {spec}')
    return spec


def average_models(models: Sequence[ModelParams],
                   weights: Optional[Sequence[float]] = None) -> ModelParams:
    """Elementwise mean of ``models``.

    Each coordinate is summed in sorted order, so the result does not depend
    on the order of the input list.
    """
    spec = _check_same_spec(models)
    if len(models) == 1:
        return models[0]
    stacked = np.stack([model.values for model in models])
    if weights is None:
        return ModelParams(spec, np.sort(stacked, axis=0).sum(axis=0) / len(models))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),) or np.any(w < 0) or not w.sum() > 0:
        raise HealsimPreconditionError(f'invalid averaging weights {list(weights)}')
    weighted = stacked * w[:, np.newaxis]
    return ModelParams(spec, np.sort(weighted, axis=0).sum(axis=0) / np.sort(w).sum())
