"""Federated rounds: FedLog plus the FedAvg and LG-FedAvg baselines.

A FedLog round broadcasts the global head, lets every client fit its own body
against the frozen head, collects one summed-statistics message per client
and replaces the head with the MAP of the updated conjugate posterior. Only
`RoundMessage` frames cross from clients to the server; bodies and raw data
never leave a client.

Messages pass through the wire codec so the server works on exactly what a
real transport would deliver and the uplink cost is measured, not assumed.

"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, TypeVar

import numpy as np

from .constants import MAP_MAX_ITERS, MAP_TOL, WIRE_FLOAT_BITS, ClientStatus
from .data import LabeledDataset
from .exception import ConfigError, ProtocolError
from .expfam import (
    HeadParams,
    PriorParams,
    SufficientStatistic,
    batch_statistic,
    conditional_log_probs,
    map_estimate,
    posterior_update,
)
from .messages import (
    HEADER_SIZE,
    RoundMessage,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    wire_round,
)
from .nn import (
    BodyNetwork,
    OptimizerState,
    TrainConfig,
    cross_entropy_loss,
    forward,
    loss_gradients,
    optimizer_step,
)
from .privacy import (
    PrivacyParams,
    noise_sigma,
    privatize,
    privatize_statistic,
)
from .utils import vlog

VLOG_TAG = 'federation'

_log = logging.getLogger(__name__)
_T = TypeVar('_T')


@dataclass
class ClientState:
    """Everything one client owns.

    Attributes:
        id: Unique client id.
        body: The local feature extractor (never transmitted by FedLog).
        train_data: Local training set.
        test_data: Local test set, same distribution as the training set.
        config: Local training settings.
        rng: Generator for batch shuffling.
        noise_rng: Generator for differential privacy noise.
        local_head: Head trained locally by the baselines.
        status: Outcome of the last local operation.
    """
    id: int
    body: BodyNetwork
    train_data: LabeledDataset
    test_data: LabeledDataset
    config: TrainConfig = field(default_factory=TrainConfig)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    noise_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    local_head: 'HeadParams|None' = None
    status: ClientStatus = ClientStatus.PENDING


@dataclass
class ServerState:
    """The server's global head and prior.

    Attributes:
        head: Global head broadcast each round.
        prior: Conjugate prior, fixed across rounds.
        round: Completed rounds.
        body_params: Global body of the FedAvg baseline.
        rng: Generator for client subsampling.
        noise_rng: Generator for the single global noise draw.
    """
    head: HeadParams
    prior: PriorParams
    round: int = 0
    body_params: 'list[np.ndarray]|None' = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    noise_rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self) -> None:
        if self.prior.chi.size != self.head.eta.size:
            raise ConfigError(f'Prior length {self.prior.chi.size} does not'
                              f' match head length {self.head.eta.size}')


@dataclass
class RoundOptions:
    """Settings shared by every round of an experiment.

    Attributes:
        wire_float_bits: Transmission precision, 32 or 64.
        privacy: Differential privacy settings, or None.
        global_noise: Add DP noise once at the server to the summed statistics
            instead of per message. This models a secure aggregation (MPC)
            deployment; no MPC protocol is run.
        map_tol: MAP gradient tolerance.
        map_max_iters: MAP iteration limit.
        client_fraction: Fraction of clients selected per round.
        workers: Thread count for client work, 1 runs serially.
    """
    wire_float_bits: int = 64
    privacy: 'PrivacyParams|None' = None
    global_noise: bool = False
    map_tol: float = MAP_TOL
    map_max_iters: int = MAP_MAX_ITERS
    client_fraction: float = 1.0
    workers: int = 1

    def __post_init__(self) -> None:
        errors = []
        if self.wire_float_bits not in WIRE_FLOAT_BITS:
            errors.append(f'wire_float_bits must be 32 or 64'
                          f' (got {self.wire_float_bits})')
        if not 0 < self.client_fraction <= 1:
            errors.append(f'client_fraction must be in (0, 1]'
                          f' (got {self.client_fraction})')
        if self.workers < 1:
            errors.append(f'workers must be >= 1 (got {self.workers})')
        if not self.map_tol > 0 or self.map_max_iters < 0:
            errors.append('map_tol must be > 0 and map_max_iters >= 0')
        if errors:
            raise ConfigError('; '.join(errors), errors)


@dataclass
class RoundResult:
    """Outcome of one round.

    Attributes:
        server: Updated server state.
        clients: All clients (updated in place).
        uplink_bits: Measured bits sent by each participating client.
        map_iterations: MAP ascent steps (0 for the baselines).
        map_converged: MAP convergence flag (True for the baselines).
        messages: Decoded FedLog messages in client id order (empty for
            the baselines).
    """
    server: ServerState
    clients: 'list[ClientState]'
    uplink_bits: 'dict[int, int]'
    map_iterations: int = 0
    map_converged: bool = True
    messages: 'list[RoundMessage]' = field(default_factory=list)


@dataclass
class Evaluation:
    """Accuracy per client and the test-count weighted mean.

    Clients without evaluation data map to None and are excluded from `mean`.
    """
    per_client: 'dict[int, float|None]'
    mean: 'float|None'
    counts: 'dict[int, int]'

    @property
    def present(self) -> 'list[float]':
        return [a for a in self.per_client.values() if a is not None]


def _for_each_client(fn: 'Callable[[ClientState], _T]',
                     clients: 'list[ClientState]',
                     workers: int = 1) -> 'list[_T]':
    """Apply `fn` to every client, results in the given client order."""
    if workers <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers,
                            thread_name_prefix='client') as pool:
        return list(pool.map(fn, clients))


def _check_client(client: ClientState, head: HeadParams) -> None:
    if client.body.feature_dim != head.m:
        raise ProtocolError(f'Feature dimension {client.body.feature_dim} does'
                            f' not match head m={head.m}', client.id)
    if client.train_data.n_class != head.n_class:
        raise ProtocolError(f'{client.train_data.n_class} classes but head has'
                            f' {head.n_class}', client.id)


def local_train(client: ClientState,
                head: HeadParams,
                train_head: bool = False) -> ClientState:
    """Mini-batch optimization of the client's loss against `head`.

    Runs `config.local_epochs` epochs, batch order shuffled by the client's
    generator. The optimizer state starts fresh on every call.

    Args:
        client: The client, updated in place.
        head: The head to train against. It is never modified; with
            `train_head` a copy is trained jointly and kept as
            `client.local_head`.
        train_head: Train body and head jointly (baselines).

    Returns:
        The same client.
    """
    data = client.train_data
    config = client.config
    if train_head:
        client.local_head = head.copy()
        head = client.local_head
    if len(data) == 0:
        _log.warning('Client %d has no training data; skipping', client.id)
        client.status = ClientStatus.EMPTY_DATA
        return client
    state = OptimizerState()
    n = len(data)
    for epoch in range(config.local_epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            body_grads, head_grad = loss_gradients(client.body,
                                                   data.inputs[batch],
                                                   data.labels[batch], head)
            params = client.body.parameters()
            grads = body_grads
            if train_head:
                params = params + [head.blocks]
                grads = grads + [head_grad]
            params, state = optimizer_step(params, grads, state, config)
            if train_head:
                head.eta = params.pop().reshape(-1)
            client.body.set_parameters(params)
        if vlog(VLOG_TAG):
            loss = cross_entropy_loss(forward(client.body, data.inputs),
                                      data.labels, head)
            _log.debug('Client %d epoch %d loss %.6g', client.id, epoch, loss)
    client.status = ClientStatus.OK
    return client


def _check_privacy(client: ClientState, privacy: PrivacyParams) -> None:
    if client.body.clamp_bound != privacy.clip_bound:
        raise ConfigError(f'Client {client.id} body does not bound features'
                          f' to b={privacy.clip_bound}')


def summarize(client: ClientState,
              privacy: 'PrivacyParams|None' = None) -> RoundMessage:
    """Summed statistics of the client's training features.

    With privacy set the statistic is privatized with the client's own noise
    generator; the body must bound its features by the privacy clip bound.

    Raises:
        `ConfigError` if privacy is requested for an unbounded body.
    """
    data = client.train_data
    m = client.body.feature_dim
    if len(data) == 0:
        features = np.zeros((0, m))
    else:
        features = forward(client.body, data.inputs)
    message = RoundMessage(client.id,
                           batch_statistic(features, data.labels, data.n_class),
                           len(data))
    if privacy is not None:
        _check_privacy(client, privacy)
        message = privatize(message, noise_sigma(privacy, m), client.noise_rng)
    return message


def _select(server: ServerState,
            clients: 'list[ClientState]',
            options: RoundOptions) -> 'list[ClientState]':
    ordered = sorted(clients, key=lambda c: c.id)
    if options.client_fraction >= 1 or not ordered:
        return ordered
    k = max(1, int(round(options.client_fraction * len(ordered))))
    chosen = np.sort(server.rng.choice(len(ordered), size=k, replace=False))
    selected = [ordered[i] for i in chosen]
    selected_ids = {c.id for c in selected}
    for client in ordered:
        if client.id not in selected_ids:
            client.status = ClientStatus.SKIPPED
    return selected


def _check_unique_ids(clients: 'list[ClientState]') -> None:
    ids = [c.id for c in clients]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f'Duplicate client ids in {ids}')


def fedlog_round(server: ServerState,
                 clients: 'list[ClientState]',
                 options: 'RoundOptions|None' = None) -> RoundResult:
    """One FedLog round.

    Broadcast head, local training with the head frozen, one message per
    client, posterior update in client id order, MAP warm-started from the
    current head (from zero on the first round).

    Raises:
        `ProtocolError` identifying the client whose dimensions do not fit.
    """
    options = options or RoundOptions()
    _check_unique_ids(clients)
    for client in clients:
        _check_client(client, server.head)
    participants = _select(server, clients, options)
    if options.privacy is not None:
        for client in participants:
            _check_privacy(client, options.privacy)
    broadcast = server.head.copy()
    per_message_privacy = None if options.global_noise else options.privacy

    def client_work(client: ClientState) -> bytes:
        local_train(client, broadcast)
        message = summarize(client, per_message_privacy)
        return encode_message(message, options.wire_float_bits)

    frames = _for_each_client(client_work, participants, options.workers)
    uplink_bits = {}
    messages = []
    for client, frame in zip(participants, frames):
        message = decode_message(frame)
        if message.client_id != client.id:
            raise ProtocolError(f'Frame claims client {message.client_id}',
                                client.id)
        if (message.stat_sum.m, message.stat_sum.n_class) != (server.head.m,
                                                              server.head.n_class):
            raise ProtocolError('Message dimensions do not match the head',
                                client.id)
        uplink_bits[client.id] = len(frame) * 8
        messages.append(message)
    posterior = posterior_update(server.prior, messages)
    if options.global_noise and options.privacy is not None:
        sigma = noise_sigma(options.privacy, server.head.m)
        noisy = privatize_statistic(
            SufficientStatistic(posterior.chi_post - server.prior.chi,
                                server.head.m, server.head.n_class),
            sigma, server.noise_rng)
        posterior.chi_post = server.prior.chi + noisy.values
    init = server.head if server.round > 0 else HeadParams.zeros(
        server.head.m, server.head.n_class)
    result = map_estimate(posterior, init, options.map_tol,
                          options.map_max_iters)
    server.head = result.head
    server.round += 1
    n_total = int(posterior.nu_post - server.prior.nu)
    _log.debug('FedLog round %d: %d messages, n=%d, MAP %d iterations',
               server.round, len(messages), n_total, result.iterations)
    return RoundResult(server, clients, uplink_bits, result.iterations,
                       result.converged, messages)


def fedavg_aggregate(models: 'list[list[np.ndarray]]',
                     weights: 'list[float]') -> 'list[np.ndarray]':
    """Entry-wise weighted average of parameter sets, weights n_c / sum n_c.

    Raises:
        `ProtocolError` on shape mismatches or a zero total weight.
    """
    if not models:
        raise ProtocolError('Nothing to aggregate')
    if len(models) != len(weights):
        raise ProtocolError(f'{len(models)} models but {len(weights)} weights')
    shapes = [np.shape(p) for p in models[0]]
    for i, model in enumerate(models):
        if [np.shape(p) for p in model] != shapes:
            raise ProtocolError(f'Model {i} has a different shape')
    total = float(np.sum(weights))
    if not total > 0:
        raise ProtocolError('Aggregation weights sum to zero')
    averaged = []
    for j in range(len(shapes)):
        acc = np.zeros(shapes[j])
        for model, weight in zip(models, weights):
            acc = acc + (weight / total) * np.asarray(model[j], dtype=np.float64)
        averaged.append(acc)
    return averaged


def lgfedavg_round(server: ServerState,
                   clients: 'list[ClientState]',
                   options: 'RoundOptions|None' = None) -> RoundResult:
    """One LG-FedAvg round with a single global layer.

    Clients train body and head jointly starting from the global head, heads
    are averaged with n_c weights and broadcast; bodies stay local.
    """
    options = options or RoundOptions()
    _check_unique_ids(clients)
    for client in clients:
        _check_client(client, server.head)
    participants = _select(server, clients, options)
    broadcast = server.head.copy()
    m, n_class = broadcast.m, broadcast.n_class

    def client_work(client: ClientState) -> bytes:
        local_train(client, broadcast, train_head=True)
        return encode_frame(client.id, len(client.train_data),
                            client.local_head.eta, m, n_class,
                            options.wire_float_bits)

    frames = _for_each_client(client_work, participants, options.workers)
    uplink_bits = {}
    heads = []
    counts = []
    for client, frame in zip(participants, frames):
        client_id, count, values, fm, fn, _ = decode_frame(frame)
        if (client_id, fm, fn) != (client.id, m, n_class):
            raise ProtocolError('Head frame does not match', client.id)
        uplink_bits[client.id] = len(frame) * 8
        heads.append([values])
        counts.append(count)
    if heads:
        (averaged,) = fedavg_aggregate(heads, counts)
        server.head = HeadParams(averaged, m, n_class)
    for client in clients:
        client.local_head = server.head.copy()
    server.round += 1
    return RoundResult(server, clients, uplink_bits)


def fedavg_round(server: ServerState,
                 clients: 'list[ClientState]',
                 options: 'RoundOptions|None' = None) -> RoundResult:
    """One FedAvg round: the whole model (body and head) is averaged.

    Raises:
        `ProtocolError` if client architectures differ.
    """
    options = options or RoundOptions()
    _check_unique_ids(clients)
    for client in clients:
        _check_client(client, server.head)
    shapes = [p.shape for p in clients[0].body.parameters()] if clients else []
    for client in clients:
        if [p.shape for p in client.body.parameters()] != shapes:
            raise ProtocolError('FedAvg needs identical body architectures',
                                client.id)
    participants = _select(server, clients, options)
    broadcast = server.head.copy()

    def client_work(client: ClientState) -> 'list[np.ndarray]':
        local_train(client, broadcast, train_head=True)
        model = client.body.parameters() + [client.local_head.eta]
        return [wire_round(p, options.wire_float_bits) for p in model]

    models = _for_each_client(client_work, participants, options.workers)
    uplink_bits = {}
    for client, model in zip(participants, models):
        uplink_bits[client.id] = (HEADER_SIZE * 8 + options.wire_float_bits
                                  * sum(p.size for p in model))
    if models:
        averaged = fedavg_aggregate(models,
                                    [len(c.train_data) for c in participants])
        server.body_params = averaged[:-1]
        server.head = HeadParams(averaged[-1], server.head.m,
                                 server.head.n_class)
    for client in clients:
        if server.body_params is not None:
            client.body.set_parameters(server.body_params)
        client.local_head = server.head.copy()
    server.round += 1
    return RoundResult(server, clients, uplink_bits)


def evaluate(clients: 'list[ClientState]',
             head: 'HeadParams|None' = None,
             split: str = 'test') -> Evaluation:
    """Accuracy of each client's body with the given (or its local) head.

    The prediction is the class with the highest conditional probability, the
    lowest class id winning ties.

    Args:
        clients: Clients to evaluate.
        head: Head to use, or None for each client's `local_head`.
        split: `test` or `train`.
    """
    if split not in ('test', 'train'):
        raise ConfigError(f'Unknown split {split}')
    per_client: 'dict[int, float|None]' = {}
    counts: 'dict[int, int]' = {}
    correct_total = 0
    count_total = 0
    for client in sorted(clients, key=lambda c: c.id):
        data = client.test_data if split == 'test' else client.train_data
        client_head = head if head is not None else client.local_head
        if client_head is None:
            raise ConfigError(f'Client {client.id} has no head to evaluate')
        if client_head.m != client.body.feature_dim:
            raise ConfigError(f'Head m={client_head.m} does not match client'
                              f' {client.id} features')
        counts[client.id] = len(data)
        if len(data) == 0:
            per_client[client.id] = None
            continue
        log_probs = conditional_log_probs(client_head,
                                          forward(client.body, data.inputs))
        predicted = np.argmax(log_probs, axis=1) + 1
        correct = int(np.sum(predicted == data.labels))
        per_client[client.id] = correct / len(data)
        correct_total += correct
        count_total += len(data)
    mean = correct_total / count_total if count_total else None
    return Evaluation(per_client, mean, counts)
