import numpy as np
import pytest

from healsim.datasets import Dataset, generate_synthetic, normalize
from healsim.exceptions import HealsimConfigError, HealsimPreconditionError, HealsimShapeError
from healsim.models import (Hyperparams, ModelKind, ModelParams, ModelSpec, average_models, evaluate,
                            gradient, init_params, loss, predict, train_step)

BINARY_1D = ModelSpec(ModelKind.BINARY, 1)


def test_param_count():
    assert ModelSpec(ModelKind.BINARY, 57).param_count == 58
    assert ModelSpec(ModelKind.MULTINOMIAL, 64, 10).param_count == 650


def test_spec_rejects_invalid_shapes():
    with pytest.raises(HealsimConfigError):
        ModelSpec(ModelKind.BINARY, 0)
    with pytest.raises(HealsimConfigError):
        ModelSpec(ModelKind.MULTINOMIAL, 3, 1)


def test_for_data_picks_family():
    assert ModelSpec.for_data(5, 2).kind is ModelKind.BINARY
    assert ModelSpec.for_data(5, 10).kind is ModelKind.MULTINOMIAL
    assert ModelSpec.for_data(5, 2, 'multinomial-logistic').outputs == 2
    with pytest.raises(HealsimConfigError):
        ModelSpec.for_data(5, 3, 'binary-logistic')


def test_params_length_and_immutability():
    with pytest.raises(HealsimShapeError):
        ModelParams(BINARY_1D, [1.0, 2.0, 3.0])
    params = ModelParams(BINARY_1D, [1.0, 2.0])
    with pytest.raises(ValueError):
        params.values[0] = 5.0


def test_hyperparams():
    assert Hyperparams(batch_size='full').batch_size is None
    with pytest.raises(HealsimConfigError):
        Hyperparams(learning_rate=-0.1)
    with pytest.raises(HealsimConfigError):
        Hyperparams(weight_decay=-1)
    with pytest.raises(HealsimConfigError):
        Hyperparams(batch_size=0)


def test_init_params_deterministic_and_bounded():
    spec = ModelSpec(ModelKind.BINARY, 3)
    assert np.array_equal(init_params(spec, 7).values, init_params(spec, 7).values)
    wide = init_params(ModelSpec(ModelKind.BINARY, 57), 1)
    assert wide.values.shape == (58,)
    assert np.all(np.abs(wide.values) <= 0.05)
    assert init_params(ModelSpec(ModelKind.MULTINOMIAL, 64, 10), 3).values.shape == (650,)


def test_train_step_zero_learning_rate_is_identity(blobs):
    params = init_params(ModelSpec.for_data(blobs.n_features, 2), 0)
    after = train_step(params, blobs, Hyperparams(learning_rate=0.0, weight_decay=0.01))
    assert np.array_equal(after.values, params.values)


def test_train_step_single_sample_matches_hand_gradient():
    spec = ModelSpec(ModelKind.BINARY, 2)
    params = ModelParams(spec, [0.1, -0.2, 0.05])
    shard = Dataset(np.array([[1.0, 2.0]]), np.array([1]), 2)
    hyper = Hyperparams(learning_rate=0.1, weight_decay=0.01)
    z = 0.1 * 1.0 - 0.2 * 2.0 + 0.05
    p = 1.0 / (1.0 + np.exp(-z))
    expected = params.values - 0.1 * ((p - 1.0) * np.array([1.0, 2.0, 1.0]) + 0.01 * params.values)
    np.testing.assert_allclose(train_step(params, shard, hyper).values, expected, rtol=1e-12)


def test_train_step_descends_on_separable_shard():
    shard = generate_synthetic(20, 2, 2, 10.0, seed=3)
    params = init_params(ModelSpec.for_data(2, 2), 0)
    hyper = Hyperparams(learning_rate=0.01, weight_decay=0.01)
    after = train_step(params, shard, hyper)
    assert loss(after, shard, 0.01) <= loss(params, shard, 0.01)


def test_train_step_leaves_input_untouched(blobs):
    params = init_params(ModelSpec.for_data(blobs.n_features, 2), 0)
    before = params.values.copy()
    train_step(params, blobs, Hyperparams())
    assert np.array_equal(params.values, before)


def test_full_batch_ignores_rng(blobs):
    params = init_params(ModelSpec.for_data(blobs.n_features, 2), 0)
    rng = np.random.default_rng(5)
    state = rng.bit_generator.state
    with_rng = train_step(params, blobs, Hyperparams(), rng)
    assert rng.bit_generator.state == state
    assert np.array_equal(with_rng.values, train_step(params, blobs, Hyperparams()).values)


def test_minibatch_is_seeded(blobs):
    params = init_params(ModelSpec.for_data(blobs.n_features, 2), 0)
    hyper = Hyperparams(batch_size=16)
    first = train_step(params, blobs, hyper, np.random.default_rng(1))
    second = train_step(params, blobs, hyper, np.random.default_rng(1))
    assert np.array_equal(first.values, second.values)
    with pytest.raises(HealsimPreconditionError):
        train_step(params, blobs, hyper)


def test_minibatch_step_covers_the_whole_shard(blobs):
    params = init_params(ModelSpec.for_data(blobs.n_features, 2), 0)
    order = np.random.default_rng(7).permutation(blobs.n_samples)
    expected = params
    for start in range(0, blobs.n_samples, 50):
        batch = order[start:start + 50]
        expected = train_step(expected, Dataset(blobs.features[batch], blobs.labels[batch], 2), Hyperparams())
    actual = train_step(params, blobs, Hyperparams(batch_size=50), np.random.default_rng(7))
    assert np.allclose(actual.values, expected.values)


def test_train_step_errors(blobs):
    params = init_params(ModelSpec(ModelKind.BINARY, 3), 0)
    with pytest.raises(HealsimShapeError):
        train_step(params, blobs, Hyperparams())


def test_reaches_full_accuracy_on_separated_blobs():
    data = generate_synthetic(100, 2, 2, 10.0, seed=1)
    params = init_params(ModelSpec.for_data(2, 2), 0)
    hyper = Hyperparams(learning_rate=0.1, weight_decay=0.0)
    for _ in range(50):
        params = train_step(params, data, hyper)
    assert evaluate(params, data) == 1.0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2024)
    eps = 1e-5
    for _ in range(1000):
        d = 10
        kind = ModelKind.BINARY if rng.random() < 0.5 else ModelKind.MULTINOMIAL
        k = 2 if kind is ModelKind.BINARY else int(rng.integers(2, 5))
        spec = ModelSpec.for_data(d, k, kind.value)
        m = int(rng.integers(1, 9))
        data = Dataset(rng.standard_normal((m, d)), rng.integers(0, k, size=m), k)
        values = rng.uniform(-1, 1, size=spec.param_count)
        wd = float(rng.uniform(0, 0.1))
        j = int(rng.integers(spec.param_count))
        plus, minus = values.copy(), values.copy()
        plus[j] += eps
        minus[j] -= eps
        numeric = (loss(ModelParams(spec, plus), data, wd) - loss(ModelParams(spec, minus), data, wd)) / (2 * eps)
        analytic = gradient(ModelParams(spec, values), data, wd)[j]
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-7


def test_training_stays_finite(blobs, multiclass_blobs):
    hyper = Hyperparams(learning_rate=0.1, weight_decay=0.01)
    for data in (blobs, multiclass_blobs):
        data, _ = normalize(data)
        params = init_params(ModelSpec.for_data(data.n_features, data.num_classes), 0)
        for _ in range(1000):
            params = train_step(params, data, hyper)
        assert params.is_finite()


def test_average_arithmetic_mean():
    a = ModelParams(BINARY_1D, [0.0, 2.0])
    b = ModelParams(BINARY_1D, [2.0, 0.0])
    assert np.array_equal(average_models([a, b]).values, [1.0, 1.0])


def test_average_of_identical_models():
    p = ModelParams(BINARY_1D, [0.3, -1.7])
    assert average_models([p]) is p
    assert np.array_equal(average_models([p, p]).values, p.values)
    np.testing.assert_allclose(average_models([p, p, p]).values, p.values, rtol=1e-15)


def test_average_matches_naive_loop(random_params):
    rng = np.random.default_rng(11)
    spec = ModelSpec(ModelKind.MULTINOMIAL, 4, 3)
    models = [random_params(spec, rng) for _ in range(5)]
    total = np.zeros(spec.param_count)
    for model in models:
        for i in range(spec.param_count):
            total[i] += model.values[i]
    np.testing.assert_allclose(average_models(models).values, total / 5, rtol=1e-12)


def test_average_is_permutation_invariant(random_params):
    rng = np.random.default_rng(7)
    spec = ModelSpec(ModelKind.BINARY, 6)
    for _ in range(1000):
        models = [random_params(spec, rng, scale=10.0) for _ in range(int(rng.integers(2, 7)))]
        shuffled = [models[i] for i in rng.permutation(len(models))]
        assert np.array_equal(average_models(models).values, average_models(shuffled).values)


def test_weighted_average():
    a = ModelParams(BINARY_1D, [0.0, 4.0])
    b = ModelParams(BINARY_1D, [4.0, 0.0])
    np.testing.assert_allclose(average_models([a, b], weights=[1, 3]).values, [3.0, 1.0])
    with pytest.raises(HealsimPreconditionError):
        average_models([a, b], weights=[0, 0])


def test_average_errors():
    with pytest.raises(HealsimPreconditionError):
        average_models([])
    with pytest.raises(HealsimShapeError):
        average_models([init_params(BINARY_1D, 0), init_params(ModelSpec(ModelKind.BINARY, 2), 0)])


def test_zero_params_predict_class_zero():
    data = Dataset(np.array([[1.0], [-1.0], [2.0], [-2.0]]), np.array([0, 1, 0, 1]), 2)
    zero = ModelParams(BINARY_1D, [0.0, 0.0])
    assert np.array_equal(predict(zero, data.features), [0, 0, 0, 0])
    assert evaluate(zero, data) == 0.5


def test_constructed_separator():
    data = Dataset(np.array([[-1.0], [-2.0], [1.0], [2.0]]), np.array([0, 0, 1, 1]), 2)
    assert evaluate(ModelParams(BINARY_1D, [1.0, 0.0]), data) == 1.0


def test_evaluate_matches_per_sample_loop(multiclass_blobs, random_params):
    rng = np.random.default_rng(3)
    test = multiclass_blobs.subset(np.arange(100))
    params = random_params(ModelSpec.for_data(test.n_features, test.num_classes), rng)
    correct = 0
    for x, y in zip(test.features, test.labels):
        scores = params.matrix @ np.append(x, 1.0)
        correct += int(np.argmax(scores) == y)
    assert evaluate(params, test) == pytest.approx(correct / 100)
