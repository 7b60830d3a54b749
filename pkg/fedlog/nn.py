"""Minimal dense feed-forward bodies with exact reverse-mode gradients.

A body maps raw inputs of dimension p to m features. The last feature is a
constant 1.0 appended after the final activation, so the global head acts as
a linear layer with bias on the m - 1 learned features.

"""
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import log_softmax, softmax

from .constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    Activation,
    OptimizerKind,
)
from .exception import ConfigError, InputError
from .utils import vlog

if TYPE_CHECKING:
    from .expfam import HeadParams

VLOG_TAG = 'nn'

_log = logging.getLogger(__name__)


@dataclass
class DenseLayer:
    """A fully connected layer `activation(W x + b)`.

    Attributes:
        weights: Matrix of shape (out_dim, in_dim).
        biases: Vector of shape (out_dim,).
        activation: The element-wise activation.
        clamp_bound: The bound b, required for `Activation.CLAMP` and
            `Activation.TANH`.
    """
    weights: np.ndarray
    biases: np.ndarray
    activation: Activation = Activation.RELU
    clamp_bound: 'float|None' = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ConfigError('Layer weights must be a matrix')
        if self.biases.shape != (self.weights.shape[0],):
            raise ConfigError(f'Bias shape {self.biases.shape} does not match'
                              f' {self.weights.shape[0]} outputs')
        self.activation = Activation(self.activation)
        if self.activation in (Activation.CLAMP, Activation.TANH):
            if self.clamp_bound is None or not self.clamp_bound > 0:
                raise ConfigError(f'{self.activation.name.lower()} activation'
                                  ' requires a bound b > 0')
            self.clamp_bound = float(self.clamp_bound)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls,
             in_dim: int,
             out_dim: int,
             rng: np.random.Generator,
             activation: Activation = Activation.RELU,
             clamp_bound: 'float|None' = None) -> 'DenseLayer':
        """Create a layer initialized uniform in +/- 1/sqrt(fan_in)."""
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f'Invalid layer dimensions {in_dim}->{out_dim}')
        limit = 1 / math.sqrt(in_dim)
        weights = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        biases = rng.uniform(-limit, limit, size=out_dim)
        return cls(weights, biases, activation, clamp_bound)

    def activate(self, z: np.ndarray) -> np.ndarray:
        if self.activation == Activation.RELU:
            return np.maximum(z, 0.0)
        if self.activation == Activation.CLAMP:
            return clamp_activation(z, self.clamp_bound)
        if self.activation == Activation.TANH:
            return self.clamp_bound * np.tanh(z / self.clamp_bound)
        return z

    def activation_grad(self, z: np.ndarray) -> np.ndarray:
        """Derivative of the activation at the pre-activation `z`."""
        if self.activation == Activation.RELU:
            return (z > 0).astype(np.float64)
        if self.activation == Activation.CLAMP:
            # subgradient 0 at exactly |z| == b
            return (np.abs(z) < self.clamp_bound).astype(np.float64)
        if self.activation == Activation.TANH:
            return 1.0 - np.tanh(z / self.clamp_bound) ** 2
        return np.ones_like(z)


class BodyNetwork:
    """A chain of dense layers producing m features (constant slot included)."""
    def __init__(self, layers: 'list[DenseLayer]') -> None:
        if not layers:
            raise ConfigError('A body needs at least one layer')
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ConfigError(f'Layer {i} expects {layers[i].in_dim} inputs'
                                  f' but layer {i - 1} gives'
                                  f' {layers[i - 1].out_dim}')
        self.layers: 'list[DenseLayer]' = list(layers)

    @classmethod
    def build(cls,
              in_dim: int,
              hidden: 'list[int]',
              feature_dim: int,
              rng: np.random.Generator,
              clamp_bound: 'float|None' = None,
              bound_activation: Activation = Activation.CLAMP,
              ) -> 'BodyNetwork':
        """Build a relu body with `len(hidden) + 1` dense layers.

        Args:
            in_dim: Raw input dimension p.
            hidden: Widths of the hidden layers.
            feature_dim: m, including the appended constant feature.
            rng: Generator used for initialization.
            clamp_bound: If set the last layer bounds features to +/- b.
            bound_activation: How the bound is applied, `CLAMP` or `TANH`.

        Raises:
            `ConfigError` if the dimensions are invalid.
        """
        if feature_dim < 2:
            raise ConfigError(f'Feature dimension must be >= 2 (got {feature_dim})')
        bound_activation = Activation(bound_activation)
        if bound_activation not in (Activation.CLAMP, Activation.TANH):
            raise ConfigError(f'Cannot bound features with'
                              f' {bound_activation.name.lower()}')
        dims = [in_dim] + list(hidden) + [feature_dim - 1]
        layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            activation = Activation.RELU
            if last:
                activation = (bound_activation if clamp_bound is not None
                              else Activation.IDENTITY)
            layers.append(DenseLayer.init(dims[i], dims[i + 1], rng,
                                          activation,
                                          clamp_bound if last else None))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim + 1

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def clamp_bound(self) -> 'float|None':
        """The feature bound of the final layer, or None if unbounded."""
        last = self.layers[-1]
        if last.activation in (Activation.CLAMP, Activation.TANH):
            return last.clamp_bound
        return None

    def parameters(self) -> 'list[np.ndarray]':
        """Parameters in the order `[W0, b0, W1, b1, ...]`."""
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.biases])
        return params

    def set_parameters(self, params: 'list[np.ndarray]') -> None:
        if len(params) != 2 * len(self.layers):
            raise ConfigError(f'Expected {2 * len(self.layers)} parameter'
                              f' arrays, got {len(params)}')
        for i, layer in enumerate(self.layers):
            weights = np.asarray(params[2 * i], dtype=np.float64)
            biases = np.asarray(params[2 * i + 1], dtype=np.float64)
            if (weights.shape != layer.weights.shape or
                biases.shape != layer.biases.shape):
                raise ConfigError(f'Parameter shape mismatch at layer {i}')
            layer.weights = weights.copy()
            layer.biases = biases.copy()

    def copy(self) -> 'BodyNetwork':
        return BodyNetwork([
            DenseLayer(l.weights.copy(), l.biases.copy(), l.activation,
                       l.clamp_bound)
            for l in self.layers
        ])

    def describe(self) -> str:
        """Architecture as `p-h1-...-(m-1)+1`."""
        dims = [str(self.in_dim)] + [str(l.out_dim) for l in self.layers]
        return '-'.join(dims) + '+1'


@dataclass
class TrainConfig:
    """Local training settings of a client.

    `local_epochs` may be 0, which leaves the body untouched.
    """
    learning_rate: float = 0.001
    batch_size: int = 10
    local_epochs: int = 5
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def __post_init__(self) -> None:
        errors = []
        if not self.learning_rate > 0:
            errors.append(f'learning_rate must be > 0 (got {self.learning_rate})')
        if self.batch_size < 1:
            errors.append(f'batch_size must be >= 1 (got {self.batch_size})')
        if self.local_epochs < 0:
            errors.append(f'local_epochs must be >= 0 (got {self.local_epochs})')
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            errors.append('adam constants must satisfy 0<beta<1, eps>0')
        if errors:
            raise ConfigError('; '.join(errors), errors)
        self.optimizer = OptimizerKind(self.optimizer)


@dataclass
class OptimizerState:
    """Per-client optimizer memory (Adam moments and step count)."""
    step: int = 0
    first_moment: 'list[np.ndarray]' = field(default_factory=list)
    second_moment: 'list[np.ndarray]' = field(default_factory=list)


def clamp_activation(x: 'float|np.ndarray', b: float) -> 'float|np.ndarray':
    """Clip values to the interval [-b, b]."""
    if not b > 0:
        raise ConfigError(f'Clamp bound must be > 0 (got {b})')
    if np.ndim(x) == 0:
        return float(min(max(x, -b), b))
    return np.clip(x, -b, b)


def _check_inputs(body: BodyNetwork, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs.reshape(1, -1)
    if inputs.ndim != 2 or inputs.shape[1] != body.in_dim:
        raise ConfigError(f'Input dimension {inputs.shape[-1]} does not match'
                          f' body input {body.in_dim}')
    return inputs


def _forward_trace(body: BodyNetwork, inputs: np.ndarray):
    """Forward pass keeping each layer's input and pre-activation."""
    activations = [inputs]
    pre_activations = []
    a = inputs
    for layer in body.layers:
        z = a @ layer.weights.T + layer.biases
        a = layer.activate(z)
        pre_activations.append(z)
        activations.append(a)
    features = np.hstack([a, np.ones((a.shape[0], 1))])
    return features, activations, pre_activations


def forward(body: BodyNetwork, inputs: np.ndarray) -> np.ndarray:
    """Compute the m features for a batch of inputs.

    Args:
        body: The feature extractor.
        inputs: Array of shape (n, p) (a single vector is treated as n=1).

    Returns:
        Array of shape (n, m) whose last column is exactly 1.0.

    Raises:
        `ConfigError` if the input dimension does not match the body.
    """
    features, _, _ = _forward_trace(body, _check_inputs(body, inputs))
    return features


def _label_index(labels: np.ndarray, n_class: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if labels.size and (labels.min() < 1 or labels.max() > n_class):
        raise InputError(f'Labels must be in 1..{n_class}')
    return labels - 1


def cross_entropy_loss(features: np.ndarray,
                       labels: np.ndarray,
                       head: 'HeadParams') -> float:
    """Summed negative log softmax likelihood of the labels under the head.

    Args:
        features: Array (n, m) of features with the constant slot.
        labels: Class ids in 1..n_class.
        head: The global head.

    Raises:
        `ConfigError` if the feature width does not match the head.
        `InputError` if a label is out of range or the feature and label
        counts differ.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.ndim != 2 or features.shape[1] != head.m:
        raise ConfigError(f'Feature width {features.shape[-1]} does not match'
                          f' head m={head.m}')
    idx = _label_index(labels, head.n_class)
    if features.shape[0] != idx.size:
        raise InputError(f'{features.shape[0]} features for {idx.size} labels')
    if idx.size == 0:
        return 0.0
    log_probs = log_softmax(features @ head.blocks.T, axis=1)
    return float(-np.sum(log_probs[np.arange(idx.size), idx]))


def loss_gradients(body: BodyNetwork,
                   inputs: np.ndarray,
                   labels: np.ndarray,
                   head: 'HeadParams',
                   ) -> 'tuple[list[np.ndarray], np.ndarray]':
    """Exact gradients of the summed cross entropy loss.

    Returns:
        `(body_grads, head_grad)` with body_grads shaped like
        `body.parameters()` and head_grad shaped like `head.blocks`.
    """
    inputs = _check_inputs(body, inputs)
    idx = _label_index(labels, head.n_class)
    if idx.size != inputs.shape[0]:
        raise InputError(f'{inputs.shape[0]} inputs but {idx.size} labels')
    if idx.size == 0:
        return ([np.zeros_like(p) for p in body.parameters()],
                np.zeros_like(head.blocks))
    features, activations, pre_activations = _forward_trace(body, inputs)
    blocks = head.blocks
    d_logits = softmax(features @ blocks.T, axis=1)
    d_logits[np.arange(idx.size), idx] -= 1.0
    head_grad = d_logits.T @ features
    # the constant feature has no upstream parameters
    d_a = (d_logits @ blocks)[:, :-1]
    grads: 'list[np.ndarray]' = []
    for i in reversed(range(body.depth)):
        layer = body.layers[i]
        d_z = d_a * layer.activation_grad(pre_activations[i])
        grads.append(d_z.sum(axis=0))
        grads.append(d_z.T @ activations[i])
        d_a = d_z @ layer.weights
    grads.reverse()
    return grads, head_grad


def body_gradient(body: BodyNetwork,
                  inputs: np.ndarray,
                  labels: np.ndarray,
                  head: 'HeadParams') -> 'list[np.ndarray]':
    """Gradients of the loss w.r.t. the body parameters, head held fixed."""
    grads, _ = loss_gradients(body, inputs, labels, head)
    return grads


def optimizer_step(params: 'list[np.ndarray]',
                   grads: 'list[np.ndarray]',
                   state: OptimizerState,
                   config: TrainConfig,
                   ) -> 'tuple[list[np.ndarray], OptimizerState]':
    """Apply one SGD or bias-corrected Adam update.

    Returns:
        New parameter arrays and the updated state.

    Raises:
        `ConfigError` if the gradient shapes do not match the parameters.
    """
    if len(params) != len(grads) or any(
            np.shape(p) != np.shape(g) for p, g in zip(params, grads)):
        raise ConfigError('Gradient shapes do not match parameters')
    lr = config.learning_rate
    if config.optimizer == OptimizerKind.SGD:
        state.step += 1
        return [p - lr * g for p, g in zip(params, grads)], state
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.second_moment = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1 - b1 ** state.step
    correction2 = 1 - b2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * g
        state.second_moment[i] = b2 * state.second_moment[i] + (1 - b2) * g * g
        m_hat = state.first_moment[i] / correction1
        v_hat = state.second_moment[i] / correction2
        updated.append(p - lr * m_hat / (np.sqrt(v_hat) + config.eps))
    if vlog(VLOG_TAG):
        _log.debug('Adam step %d over %d arrays', state.step, len(params))
    return updated, state
