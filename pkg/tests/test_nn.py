import logging
import math

import numpy as np
import pytest

from fedlog.constants import Activation, OptimizerKind
from fedlog.exception import ConfigError, InputError
from fedlog.expfam import HeadParams
from fedlog.nn import (
    BodyNetwork,
    DenseLayer,
    OptimizerState,
    TrainConfig,
    body_gradient,
    clamp_activation,
    cross_entropy_loss,
    forward,
    loss_gradients,
    optimizer_step,
)

logger = logging.getLogger(__name__)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(rng: np.random.Generator):
    depth = int(rng.integers(1, 4))
    in_dim = int(rng.integers(1, 5))
    hidden = [int(rng.integers(1, 9)) for _ in range(depth - 1)]
    m = int(rng.integers(2, 6))
    n_class = int(rng.integers(2, 5))
    clamp = float(rng.uniform(0.5, 3)) if rng.random() < 0.5 else None
    body = BodyNetwork.build(in_dim, hidden, m, rng, clamp)
    head = HeadParams(rng.normal(size=m * n_class), m, n_class)
    n = int(rng.integers(1, 6))
    inputs = rng.normal(size=(n, in_dim))
    labels = rng.integers(1, n_class + 1, size=n)
    return body, head, inputs, labels


def numeric_gradient(fn, param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        saved = param[idx]
        param[idx] = saved + step
        upper = fn()
        param[idx] = saved - step
        lower = fn()
        param[idx] = saved
        grad[idx] = (upper - lower) / (2 * step)
    return grad


def test_clamp_activation():
    assert clamp_activation(3.5, 2) == 2.0
    assert clamp_activation(-3.5, 2) == -2.0
    assert clamp_activation(0.7, 2) == 0.7
    values = np.linspace(-10, 10, 101)
    clamped = clamp_activation(values, 1.5)
    assert np.all(np.abs(clamped) <= 1.5)
    inside = np.abs(values) <= 1.5
    assert np.array_equal(clamped[inside], values[inside])


def test_clamp_requires_positive_bound():
    with pytest.raises(ConfigError):
        clamp_activation(1.0, 0)
    with pytest.raises(ConfigError):
        DenseLayer(np.eye(2), np.zeros(2), Activation.CLAMP, None)


def test_forward_zero_layer():
    body = BodyNetwork([DenseLayer(np.zeros((2, 2)), np.zeros(2),
                                   Activation.IDENTITY)])
    assert np.array_equal(forward(body, [0.3, -0.2]), [[0.0, 0.0, 1.0]])


def test_forward_identity_layer():
    body = BodyNetwork([DenseLayer(np.eye(2), np.zeros(2), Activation.IDENTITY)])
    assert body.feature_dim == 3
    assert np.array_equal(forward(body, [1.0, 2.0]), [[1.0, 2.0, 1.0]])


def test_forward_matches_scalar_loop(rng):
    body = BodyNetwork.build(3, [4], 3, rng)
    inputs = rng.normal(size=(4, 3))
    expected = []
    for x in inputs:
        a = list(x)
        for layer in body.layers:
            z = [sum(layer.weights[o, i] * a[i] for i in range(len(a)))
                 + layer.biases[o] for o in range(layer.out_dim)]
            if layer.activation == Activation.RELU:
                z = [max(v, 0.0) for v in z]
            a = z
        expected.append(a + [1.0])
    assert np.allclose(forward(body, inputs), expected, rtol=1e-12, atol=1e-12)


def test_forward_constant_slot_after_clamp(rng):
    body = BodyNetwork.build(2, [8], 4, rng, clamp_bound=0.1)
    features = forward(body, rng.normal(scale=100, size=(50, 2)))
    assert np.all(features[:, -1] == 1.0)
    assert np.all(np.abs(features[:, :-1]) <= 0.1)
    assert body.clamp_bound == 0.1


def test_forward_tanh_bound(rng):
    body = BodyNetwork.build(2, [8], 3, rng, clamp_bound=2.0,
                             bound_activation=Activation.TANH)
    assert body.layers[-1].activation == Activation.TANH
    assert body.clamp_bound == 2.0
    features = forward(body, rng.normal(scale=100, size=(50, 2)))
    assert np.all(np.abs(features[:, :-1]) <= 2.0)
    assert np.all(features[:, -1] == 1.0)
    layer = DenseLayer(np.eye(2), np.zeros(2), Activation.TANH, 2.0)
    assert np.allclose(layer.activate(np.array([0.0, 1e-4])), [0.0, 1e-4])


def test_tanh_requires_bound(rng):
    with pytest.raises(ConfigError):
        DenseLayer(np.eye(2), np.zeros(2), Activation.TANH, None)
    with pytest.raises(ConfigError):
        BodyNetwork.build(2, [4], 3, rng, clamp_bound=1.0,
                          bound_activation=Activation.RELU)


def test_tanh_body_gradient_finite_differences():
    rng = np.random.default_rng(77)
    for _ in range(20):
        body = BodyNetwork.build(2, [4], 3, rng,
                                 clamp_bound=float(rng.uniform(0.5, 3)),
                                 bound_activation=Activation.TANH)
        head = HeadParams(rng.normal(size=6), 3, 2)
        inputs = rng.normal(size=(4, 2))
        labels = rng.integers(1, 3, size=4)
        grads = body_gradient(body, inputs, labels, head)
        for param, grad in zip(body.parameters(), grads):
            numeric = numeric_gradient(
                lambda: cross_entropy_loss(forward(body, inputs), labels, head),
                param)
            assert np.allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_forward_dimension_mismatch(rng):
    body = BodyNetwork.build(3, [], 2, rng)
    with pytest.raises(ConfigError):
        forward(body, np.zeros((2, 4)))


def test_body_layers_must_chain(rng):
    first = DenseLayer.init(2, 3, rng)
    second = DenseLayer.init(4, 1, rng)
    with pytest.raises(ConfigError):
        BodyNetwork([first, second])


def test_build_depth_and_describe(rng):
    body = BodyNetwork.build(2, [16, 16], 3, rng)
    assert body.depth == 3
    assert body.describe() == '2-16-16-2+1'
    assert body.clamp_bound is None
    assert body.n_params == (2 * 16 + 16) + (16 * 16 + 16) + (16 * 2 + 2)


def test_loss_uniform_head():
    head = HeadParams.zeros(4, 10)
    features = np.random.default_rng(0).normal(size=(7, 4))
    labels = np.arange(1, 8)
    assert cross_entropy_loss(features, labels, head) == pytest.approx(
        7 * math.log(10), rel=1e-12)


def test_loss_hand_value():
    head = HeadParams([math.log(2), 0.0], 1, 2)
    assert cross_entropy_loss([[1.0]], [1], head) == pytest.approx(0.405465,
                                                                   abs=1e-6)


def test_loss_saturated_logit():
    head = HeadParams([1000.0, 0.0], 1, 2)
    assert cross_entropy_loss([[1.0]], [1], head) == pytest.approx(0.0, abs=1e-12)


def test_loss_shift_invariance(rng):
    m, n_class = 3, 4
    head = HeadParams(rng.normal(size=m * n_class), m, n_class)
    shift = rng.normal(size=m)
    shifted = HeadParams((head.blocks + shift).reshape(-1), m, n_class)
    features = np.hstack([rng.normal(size=(5, m - 1)), np.ones((5, 1))])
    labels = rng.integers(1, n_class + 1, size=5)
    assert cross_entropy_loss(features, labels, shifted) == pytest.approx(
        cross_entropy_loss(features, labels, head), rel=1e-10)


def test_loss_label_out_of_range():
    with pytest.raises(InputError):
        cross_entropy_loss([[1.0]], [3], HeadParams.zeros(1, 2))


def test_loss_feature_width_mismatch():
    with pytest.raises(ConfigError):
        cross_entropy_loss(np.ones((4, 3)), [1, 2, 1, 2], HeadParams.zeros(2, 2))


def test_loss_count_mismatch():
    with pytest.raises(InputError):
        cross_entropy_loss(np.ones((5, 2)), [1, 2, 1], HeadParams.zeros(2, 2))


def test_body_gradient_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        body, head, inputs, labels = random_instance(rng)
        grads = body_gradient(body, inputs, labels, head)
        for param, grad in zip(body.parameters(), grads):
            numeric = numeric_gradient(
                lambda: cross_entropy_loss(forward(body, inputs), labels, head),
                param)
            assert np.allclose(grad, numeric, rtol=1e-4, atol=1e-6)


def test_head_gradient_finite_differences(rng):
    body, head, inputs, labels = random_instance(rng)
    _, head_grad = loss_gradients(body, inputs, labels, head)
    blocks = head.eta.reshape(head.n_class, head.m)
    numeric = numeric_gradient(
        lambda: cross_entropy_loss(forward(body, inputs), labels, head), blocks)
    assert np.allclose(head_grad, numeric, rtol=1e-4, atol=1e-6)


def test_body_gradient_empty_batch(rng):
    body = BodyNetwork.build(2, [3], 3, rng)
    grads = body_gradient(body, np.zeros((0, 2)), np.zeros(0, dtype=int),
                          HeadParams.zeros(3, 2))
    assert all(np.all(g == 0) for g in grads)


def test_body_gradient_duplicates_double(rng):
    body = BodyNetwork.build(2, [5], 3, rng)
    head = HeadParams(rng.normal(size=6), 3, 2)
    x = rng.normal(size=(1, 2))
    single = body_gradient(body, x, [2], head)
    double = body_gradient(body, np.vstack([x, x]), [2, 2], head)
    for s, d in zip(single, double):
        assert np.allclose(d, 2 * s, rtol=1e-12, atol=1e-15)


def test_sgd_step():
    config = TrainConfig(learning_rate=0.1, optimizer=OptimizerKind.SGD)
    params, _ = optimizer_step([np.array(1.0)], [np.array(0.5)],
                               OptimizerState(), config)
    assert float(params[0]) == pytest.approx(0.95)


def test_zero_gradient_leaves_parameters():
    for kind in OptimizerKind:
        config = TrainConfig(optimizer=kind)
        params, _ = optimizer_step([np.array([1.0, -2.0])], [np.zeros(2)],
                                   OptimizerState(), config)
        assert np.array_equal(params[0], [1.0, -2.0])


def test_adam_first_step():
    config = TrainConfig(learning_rate=0.001, optimizer=OptimizerKind.ADAM)
    params, state = optimizer_step([np.array(0.0)], [np.array(1.0)],
                                   OptimizerState(), config)
    assert float(params[0]) == pytest.approx(-0.001, rel=1e-6)
    assert state.step == 1


def test_optimizer_shape_mismatch():
    with pytest.raises(ConfigError):
        optimizer_step([np.zeros(2)], [np.zeros(3)], OptimizerState(),
                       TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError) as exc_info:
        TrainConfig(learning_rate=0, batch_size=0)
    assert len(exc_info.value.errors) == 2
    assert TrainConfig(local_epochs=0).local_epochs == 0
