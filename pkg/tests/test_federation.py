import logging

import numpy as np
import pytest

from fedlog.constants import Activation, ClientStatus, OptimizerKind
from fedlog.data import LabeledDataset, gen_circle, split_by_sorted_x1
from fedlog.exception import ConfigError, ProtocolError
from fedlog.expfam import HeadParams, PriorParams, batch_statistic, map_solve
from fedlog.federation import (
    ClientState,
    RoundOptions,
    ServerState,
    evaluate,
    fedavg_aggregate,
    fedavg_round,
    fedlog_round,
    lgfedavg_round,
    local_train,
    summarize,
)
from fedlog.messages import frame_size_bits
from fedlog.nn import (
    BodyNetwork,
    DenseLayer,
    TrainConfig,
    cross_entropy_loss,
    forward,
)
from fedlog.privacy import PrivacyParams

logger = logging.getLogger(__name__)

M = 3


def make_client(client_id: int,
                data: LabeledDataset,
                hidden=(8,),
                seed: int = 0,
                clamp: 'float|None' = None,
                config: 'TrainConfig|None' = None,
                body_seed: 'int|None' = None) -> ClientState:
    body_seed = client_id if body_seed is None else body_seed
    body = BodyNetwork.build(data.input_dim, list(hidden), M,
                             np.random.default_rng([seed, body_seed]), clamp)
    return ClientState(id=client_id,
                       body=body,
                       train_data=data,
                       test_data=data,
                       config=config or TrainConfig(learning_rate=0.01,
                                                    batch_size=10,
                                                    local_epochs=2),
                       rng=np.random.default_rng([seed, 100 + client_id]),
                       noise_rng=np.random.default_rng([seed, 200 + client_id]))


def circle_clients(seed: int = 0, hidden=((8, 8), (8,))) -> 'list[ClientState]':
    first, second = split_by_sorted_x1(gen_circle(40, seed))
    return [make_client(0, first, hidden[0], seed),
            make_client(1, second, hidden[1 % len(hidden)], seed)]


def make_server(n_class: int = 2, seed: int = 0) -> ServerState:
    head = HeadParams.random(M, n_class, np.random.default_rng(seed))
    return ServerState(head=head, prior=PriorParams.default(M, n_class))


def test_local_train_zero_epochs():
    client = circle_clients()[0]
    client.config = TrainConfig(local_epochs=0)
    before = [p.copy() for p in client.body.parameters()]
    local_train(client, make_server().head)
    assert all(np.array_equal(a, b)
               for a, b in zip(before, client.body.parameters()))
    assert client.status == ClientStatus.OK


def test_local_train_reduces_loss():
    rng = np.random.default_rng(5)
    inputs = rng.uniform(-1, 1, size=(40, 2))
    labels = np.where(inputs[:, 0] > 0, 2, 1)
    data = LabeledDataset(inputs, labels, 2)
    client = make_client(0, data, config=TrainConfig(learning_rate=0.01,
                                                     batch_size=40,
                                                     local_epochs=30))
    head = HeadParams([-1.0, 0.0, 0.0, 1.0, 0.0, 0.0], M, 2)
    initial = cross_entropy_loss(forward(client.body, inputs), labels, head)
    local_train(client, head)
    final = cross_entropy_loss(forward(client.body, inputs), labels, head)
    assert final < initial


def test_local_train_keeps_head_frozen():
    client = circle_clients()[0]
    head = make_server().head
    before = head.eta.copy()
    local_train(client, head)
    assert np.array_equal(head.eta, before)


def test_local_train_deterministic():
    first = circle_clients(seed=3)[0]
    second = circle_clients(seed=3)[0]
    head = make_server().head
    local_train(first, head)
    local_train(second, head)
    for a, b in zip(first.body.parameters(), second.body.parameters()):
        assert a.tobytes() == b.tobytes()


def test_local_train_empty_data():
    client = make_client(0, LabeledDataset.empty(2, 2))
    before = [p.copy() for p in client.body.parameters()]
    local_train(client, make_server().head)
    assert client.status == ClientStatus.EMPTY_DATA
    assert all(np.array_equal(a, b)
               for a, b in zip(before, client.body.parameters()))
    message = summarize(client)
    assert message.count == 0
    assert np.all(message.stat_sum.values == 0)


def identity_client(points, labels, n_class: int = 3) -> ClientState:
    body = BodyNetwork([DenseLayer([[1.0]], [0.0], Activation.IDENTITY)])
    data = LabeledDataset(np.array(points, dtype=float).reshape(-1, 1), labels,
                          n_class)
    return ClientState(id=4, body=body, train_data=data, test_data=data)


def test_summarize_single_point():
    message = summarize(identity_client([0.5], [2]))
    assert np.array_equal(message.stat_sum.values, [0, 0, 0.5, 1.0, 0, 0])
    assert message.count == 1
    assert message.client_id == 4


def test_summarize_duplicated_point():
    single = summarize(identity_client([0.5], [2]))
    double = summarize(identity_client([0.5, 0.5], [2, 2]))
    assert np.array_equal(double.stat_sum.values, 2 * single.stat_sum.values)
    assert double.count == 2


def test_summarize_privacy_requires_clamped_body():
    client = circle_clients()[0]
    with pytest.raises(ConfigError):
        summarize(client, PrivacyParams(1.0))


def test_summarize_with_privacy():
    first, second = split_by_sorted_x1(gen_circle(40, 0))
    client = make_client(0, first, clamp=2.0)
    plain = summarize(client)
    noisy = summarize(client, PrivacyParams(1.0, 0.01, 2.0))
    assert noisy.count == plain.count
    assert not np.array_equal(noisy.stat_sum.values, plain.stat_sum.values)


def test_fedlog_round_without_clients():
    server = make_server()
    result = fedlog_round(server, [])
    assert result.map_converged
    assert np.max(np.abs(server.head.eta)) < 1e-6
    server.head = HeadParams(np.full(6, 3.0), M, 2)
    fedlog_round(server, [])
    assert server.round == 2
    assert np.max(np.abs(server.head.eta)) < 1e-5


def test_fedlog_round_single_client_is_centralized():
    data = gen_circle(40, 9)
    client = make_client(0, data)
    reference = make_client(0, data)
    server = make_server()
    head = server.head.copy()
    fedlog_round(server, [client])
    local_train(reference, head)
    stat = batch_statistic(forward(reference.body, data.inputs), data.labels, 2)
    expected = map_solve(PriorParams.default(M, 2), stat, len(data))
    assert np.allclose(server.head.eta, expected.head.eta, atol=1e-9)


def test_fedlog_round_dimension_mismatch():
    clients = circle_clients()
    clients[1].body = BodyNetwork.build(2, [4], M + 1, np.random.default_rng(0))
    with pytest.raises(ProtocolError) as exc_info:
        fedlog_round(make_server(), clients)
    assert exc_info.value.client_id == 1


def test_fedlog_round_duplicate_ids():
    clients = circle_clients()
    clients[1].id = 0
    with pytest.raises(ProtocolError):
        fedlog_round(make_server(), clients)


@pytest.mark.parametrize('float_bits', [32, 64])
def test_fedlog_uplink_matches_frame_size(float_bits: int):
    first, second = split_by_sorted_x1(gen_circle(60, 1))
    small = LabeledDataset(first.inputs[:5], first.labels[:5], 2)
    clients = [make_client(0, small), make_client(1, second)]
    result = fedlog_round(make_server(), clients,
                          RoundOptions(wire_float_bits=float_bits))
    expected = frame_size_bits(M, 2, float_bits)
    assert result.uplink_bits == {0: expected, 1: expected}


def test_fedlog_round_client_order_irrelevant():
    forward_order = circle_clients(seed=4)
    server = make_server()
    fedlog_round(server, forward_order)
    reverse_order = list(reversed(circle_clients(seed=4)))
    other = make_server()
    fedlog_round(other, reverse_order)
    assert server.head.eta.tobytes() == other.head.eta.tobytes()


def test_fedlog_round_threads_match_serial():
    serial = make_server()
    fedlog_round(serial, circle_clients(seed=6))
    threaded = make_server()
    clients = circle_clients(seed=6)
    fedlog_round(threaded, clients, RoundOptions(workers=4))
    assert serial.head.eta.tobytes() == threaded.head.eta.tobytes()
    assert all(c.status == ClientStatus.OK for c in clients)


def test_fedlog_round_global_noise():
    def noisy_round(seed: int) -> np.ndarray:
        clients = circle_clients(seed=2, hidden=((8,),))
        for client in clients:
            client.body = BodyNetwork.build(2, [8], M,
                                            np.random.default_rng(client.id),
                                            clamp_bound=2.0)
        server = make_server()
        server.noise_rng = np.random.default_rng(seed)
        options = RoundOptions(privacy=PrivacyParams(1.0), global_noise=True)
        fedlog_round(server, clients, options)
        return server.head.eta

    assert np.array_equal(noisy_round(1), noisy_round(1))
    assert not np.array_equal(noisy_round(1), noisy_round(2))


def test_fedlog_round_global_noise_requires_clamped_bodies():
    clients = circle_clients(seed=2, hidden=((8,),))
    server = make_server()
    before = server.head.eta.copy()
    options = RoundOptions(privacy=PrivacyParams(1.0), global_noise=True)
    with pytest.raises(ConfigError):
        fedlog_round(server, clients, options)
    assert server.round == 0
    assert np.array_equal(server.head.eta, before)


def test_fedlog_round_client_fraction():
    data = gen_circle(80, 0)
    clients = [make_client(c, data.subset(np.arange(c * 20, c * 20 + 20)))
               for c in range(4)]
    server = make_server()
    server.rng = np.random.default_rng(8)
    result = fedlog_round(server, clients, RoundOptions(client_fraction=0.5))
    assert len(result.uplink_bits) == 2
    skipped = [c for c in clients if c.status == ClientStatus.SKIPPED]
    assert len(skipped) == 2
    assert not set(c.id for c in skipped) & set(result.uplink_bits)


def test_fedavg_aggregate_examples():
    assert fedavg_aggregate([[np.array(0.0)], [np.array(2.0)]], [1, 1])[0] == 1.0
    assert fedavg_aggregate([[np.array(0.0)], [np.array(4.0)]], [3, 1])[0] == 1.0
    model = [np.arange(4.0).reshape(2, 2), np.ones(3)]
    averaged = fedavg_aggregate([model, model, model], [1, 5, 2])
    assert all(np.allclose(a, b) for a, b in zip(averaged, model))


def test_fedavg_aggregate_equal_weights_is_mean():
    rng = np.random.default_rng(12)
    models = [[rng.normal(size=(3, 2))] for _ in range(5)]
    averaged = fedavg_aggregate(models, [7] * 5)
    assert np.allclose(averaged[0], np.mean([m[0] for m in models], axis=0))


def test_fedavg_aggregate_errors():
    with pytest.raises(ProtocolError):
        fedavg_aggregate([[np.zeros(2)], [np.zeros(3)]], [1, 1])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([[np.zeros(2)]], [0])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([], [])


def test_lgfedavg_single_client_is_local_training():
    data = gen_circle(40, 3)
    client = make_client(0, data)
    reference = make_client(0, data)
    server = make_server()
    head = server.head.copy()
    lgfedavg_round(server, [client])
    local_train(reference, head, train_head=True)
    assert np.array_equal(server.head.eta, reference.local_head.eta)
    assert np.array_equal(client.local_head.eta, server.head.eta)


def test_lgfedavg_identical_clients():
    data = gen_circle(40, 5)
    clients = [make_client(c, data, body_seed=0) for c in range(2)]
    for client in clients:
        client.rng = np.random.default_rng(77)
    reference = make_client(0, data, body_seed=0)
    reference.rng = np.random.default_rng(77)
    server = make_server()
    head = server.head.copy()
    lgfedavg_round(server, clients)
    local_train(reference, head, train_head=True)
    assert np.array_equal(server.head.eta, reference.local_head.eta)


def test_lgfedavg_uplink_equals_fedlog():
    options = RoundOptions(wire_float_bits=32)
    fedlog = fedlog_round(make_server(), circle_clients(), options)
    lgfedavg = lgfedavg_round(make_server(), circle_clients(), options)
    assert fedlog.uplink_bits == lgfedavg.uplink_bits


def test_lgfedavg_keeps_bodies_local():
    clients = circle_clients()
    lgfedavg_round(make_server(), clients)
    first, second = (c.body.parameters() for c in clients)
    assert len(first) != len(second)


def test_fedavg_round_requires_identical_bodies():
    with pytest.raises(ProtocolError):
        fedavg_round(make_server(), circle_clients())


def test_fedavg_round_shares_everything():
    first, second = split_by_sorted_x1(gen_circle(40, 8))
    clients = [make_client(0, first, body_seed=0),
               make_client(1, second, body_seed=0)]
    server = make_server()
    result = fedavg_round(server, clients)
    for a, b in zip(clients[0].body.parameters(), clients[1].body.parameters()):
        assert np.array_equal(a, b)
    assert np.array_equal(clients[0].local_head.eta, server.head.eta)
    n_params = clients[0].body.n_params + M * 2
    assert result.uplink_bits[0] == 13 * 8 + 64 * n_params


def test_evaluate_perfect_head():
    client = identity_client([-2.0, -0.5, 0.5, 3.0], [1, 1, 2, 2], 2)
    head = HeadParams([-1.0, 0.0, 1.0, 0.0], 2, 2)
    evaluation = evaluate([client], head)
    assert evaluation.per_client == {4: 1.0}
    assert evaluation.mean == 1.0


def test_evaluate_tie_break_lowest_class():
    client = identity_client([1.0, 2.0, 3.0, 4.0, 5.0], [1, 2, 2, 1, 2], 2)
    evaluation = evaluate([client], HeadParams.zeros(2, 2))
    assert evaluation.mean == pytest.approx(0.4)


def test_evaluate_random_head_near_chance():
    rng = np.random.default_rng(19)
    n = 10_000
    data = LabeledDataset(rng.normal(size=(n, 3)),
                          rng.integers(1, 11, size=n), 10)
    client = make_client(0, data)
    head = HeadParams(rng.normal(size=M * 10), M, 10)
    accuracy = evaluate([client], head).mean
    assert abs(accuracy - 0.1) < 4 * np.sqrt(0.1 * 0.9 / n)


def test_evaluate_empty_test_set_excluded():
    full = identity_client([-1.0, 1.0], [1, 2], 2)
    empty = identity_client([], [], 2)
    empty.id = 5
    head = HeadParams([-1.0, 0.0, 1.0, 0.0], 2, 2)
    evaluation = evaluate([full, empty], head)
    assert evaluation.per_client[5] is None
    assert evaluation.mean == 1.0
    assert evaluation.counts == {4: 2, 5: 0}


def test_evaluate_uses_local_heads():
    client = identity_client([-1.0, 1.0], [1, 2], 2)
    with pytest.raises(ConfigError):
        evaluate([client])
    client.local_head = HeadParams([-1.0, 0.0, 1.0, 0.0], 2, 2)
    assert evaluate([client]).mean == 1.0


def test_round_options_validation():
    with pytest.raises(ConfigError) as exc_info:
        RoundOptions(wire_float_bits=16, client_fraction=0, workers=0)
    assert len(exc_info.value.errors) == 3


def test_sgd_clients_train():
    client = circle_clients()[0]
    client.config = TrainConfig(learning_rate=0.1, optimizer=OptimizerKind.SGD,
                                local_epochs=1)
    before = [p.copy() for p in client.body.parameters()]
    local_train(client, make_server().head)
    assert any(not np.array_equal(a, b)
               for a, b in zip(before, client.body.parameters()))
