"""Seeded experiment runs, metrics files and significance summaries.

Every random draw of a run comes from a stream derived from the run seed and
a fixed key, so data, bodies, the shared head initialization and batch
orders are identical for every algorithm compared under the same seed.

"""
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from importlib.metadata import PackageNotFoundError, version
from itertools import permutations
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig, resolve_data_path
from .constants import SIGNIFICANCE_LEVEL, Activation, Algorithm, Task
from .data import (
    LabeledDataset,
    PartitionSpec,
    circle_test_sets,
    gen_circle,
    load_idx_dataset,
    partition_like,
    shard_partition,
    split_by_sorted_x1,
    split_threshold,
    stratified_subsample,
)
from .exception import ConfigError
from .expfam import HeadParams, PriorParams
from .federation import (
    ClientState,
    RoundOptions,
    RoundResult,
    ServerState,
    evaluate,
    fedavg_round,
    fedlog_round,
    lgfedavg_round,
)
from .messages import (
    HEADER_SIZE,
    dump_messages,
    frame_size_bits,
    message_size_bits,
)
from .nn import BodyNetwork
from .privacy import ACCOUNTING_NOTE, client_noise_rng
from .stats import wilcoxon_one_tailed
from .utils import derive_rng, format_float, ts_to_iso

__all__ = [
    'MetricsRow',
    'METRICS_COLUMNS',
    'message_dump_name',
    'message_size_bits',
    'read_metrics',
    'run_experiment',
    'run_sweep',
    'summarize_runs',
    'write_metrics',
]

_log = logging.getLogger(__name__)

# derive_rng keys
_TRAIN_STREAM = 1
_TEST_STREAM = 2
_BODY_STREAM = 3
_BATCH_STREAM = 4
_HEAD_STREAM = 5
_SELECT_STREAM = 6
_SERVER_NOISE_STREAM = 8

_ROUNDS: 'dict[Algorithm, Callable[..., RoundResult]]' = {
    Algorithm.FEDLOG: fedlog_round,
    Algorithm.FEDAVG: fedavg_round,
    Algorithm.LGFEDAVG1: lgfedavg_round,
}


def package_version() -> str:
    try:
        return version('fedlog')
    except PackageNotFoundError:
        return 'unknown'


@dataclass
class MetricsRow:
    """Metrics recorded after a round (round 0 is the untrained model).

    Bits are per client and per round. `wall_ms` is not part of the CSV.
    """
    seed: int
    local_epochs: int
    round: int
    algorithm: str
    mean_test_accuracy: float
    mean_train_accuracy: float
    client_accuracy_mean: float
    client_accuracy_min: float
    client_accuracy_max: float
    uplink_bits_per_client: int
    downlink_bits_per_client: int
    map_iterations: int
    map_converged: bool
    wall_ms: float = field(default=0.0, compare=False)


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow)
                        if f.name != 'wall_ms')


@dataclass
class _Run:
    server: ServerState
    clients: 'list[ClientState]'
    uplink_bits: int
    downlink_bits: int


def _load_idx(config: ExperimentConfig,
              ) -> 'tuple[LabeledDataset, LabeledDataset]':
    train = load_idx_dataset(resolve_data_path(config.train_images),
                             resolve_data_path(config.train_labels),
                             config.n_class)
    test = load_idx_dataset(resolve_data_path(config.test_images),
                            resolve_data_path(config.test_labels),
                            config.n_class)
    return train, test


def _client_data(config: ExperimentConfig,
                 seed: int,
                 idx_data: 'tuple[LabeledDataset, LabeledDataset]|None',
                 ) -> 'tuple[list[LabeledDataset], list[LabeledDataset]]':
    if config.task == Task.SYNTHETIC_CIRCLE:
        train = gen_circle(config.n_train, derive_rng(seed, _TRAIN_STREAM))
        first, second = split_by_sorted_x1(train)
        tests = circle_test_sets(config.n_test_per_client,
                                 split_threshold(first, second),
                                 derive_rng(seed, _TEST_STREAM))
        return [first, second], list(tests)
    train_full, test_full = idx_data
    train = stratified_subsample(train_full, config.train_fraction,
                                 derive_rng(seed, _TRAIN_STREAM))
    parts = shard_partition(train, PartitionSpec(config.n_clients,
                                                 config.classes_per_client,
                                                 seed))
    return parts, partition_like(test_full, parts,
                                 derive_rng(seed, _TEST_STREAM))


def _setup(config: ExperimentConfig,
           seed: int,
           idx_data: 'tuple[LabeledDataset, LabeledDataset]|None' = None,
           ) -> _Run:
    """Clients and server of one seeded run."""
    trains, tests = _client_data(config, seed, idx_data)
    m, n_class = config.feature_dim, config.n_classes
    bound, bound_activation = None, Activation.CLAMP
    if config.feature_bound is not None:
        bound, bound_activation = config.feature_bound, Activation.TANH
    elif config.privacy is not None:
        bound = config.clip_bound
    noise_seed = seed if config.dp_seeded_noise else None
    clients = []
    for c, (train, test) in enumerate(zip(trains, tests)):
        # FedAvg averages bodies, so every client starts from the same one
        body_key = 0 if config.algorithm == Algorithm.FEDAVG else c
        body = BodyNetwork.build(train.input_dim, config.hidden_for(c), m,
                                 derive_rng(seed, _BODY_STREAM, body_key),
                                 bound, bound_activation)
        clients.append(ClientState(id=c,
                                   body=body,
                                   train_data=train,
                                   test_data=test,
                                   config=config.train_config(),
                                   rng=derive_rng(seed, _BATCH_STREAM, c),
                                   noise_rng=client_noise_rng(noise_seed, c)))
    head = HeadParams.random(m, n_class, derive_rng(seed, _HEAD_STREAM))
    for client in clients:
        client.local_head = head.copy()
    server_noise = (derive_rng(seed, _SERVER_NOISE_STREAM)
                    if config.dp_seeded_noise else derive_rng(None))
    server = ServerState(head=head,
                         prior=PriorParams.default(m, n_class, config.prior_nu),
                         rng=derive_rng(seed, _SELECT_STREAM),
                         noise_rng=server_noise)
    bits = config.wire_float_bits
    if config.algorithm == Algorithm.FEDAVG:
        n_params = clients[0].body.n_params + m * n_class
        uplink = HEADER_SIZE * 8 + n_params * bits
        downlink = uplink
    else:
        uplink = frame_size_bits(m, n_class, bits)
        downlink = frame_size_bits(m, n_class, bits)
    return _Run(server, clients, uplink, downlink)


def _metrics_row(config: ExperimentConfig,
                 seed: int,
                 run: _Run,
                 round_no: int,
                 result: 'RoundResult|None',
                 wall_ms: float) -> MetricsRow:
    head = run.server.head if config.algorithm == Algorithm.FEDLOG else None
    test_eval = evaluate(run.clients, head, 'test')
    train_eval = evaluate(run.clients, head, 'train')
    present = test_eval.present or [math.nan]
    uplink = run.uplink_bits
    if result is not None and result.uplink_bits:
        uplink = int(round(np.mean(list(result.uplink_bits.values()))))
    return MetricsRow(
        seed=seed,
        local_epochs=config.local_epochs,
        round=round_no,
        algorithm=config.algorithm.name.lower(),
        mean_test_accuracy=_or_nan(test_eval.mean),
        mean_train_accuracy=_or_nan(train_eval.mean),
        client_accuracy_mean=float(np.mean(present)),
        client_accuracy_min=float(np.min(present)),
        client_accuracy_max=float(np.max(present)),
        uplink_bits_per_client=uplink,
        downlink_bits_per_client=run.downlink_bits,
        map_iterations=result.map_iterations if result else 0,
        map_converged=result.map_converged if result else True,
        wall_ms=wall_ms,
    )


def _or_nan(value: 'float|None') -> float:
    return math.nan if value is None else float(value)


def _dump_round(dump_dir: Path,
                config: ExperimentConfig,
                seed: int,
                round_no: int,
                result: RoundResult) -> None:
    if not result.messages:
        return
    path = dump_dir / message_dump_name(config.algorithm, config.local_epochs,
                                        seed, round_no)
    dump_messages(path, result.messages, config.wire_float_bits)


def message_dump_name(algorithm: Algorithm,
                      local_epochs: int,
                      seed: int,
                      round_no: int) -> str:
    """File name of the message dump of one round."""
    return (f'{algorithm.name.lower()}_e{local_epochs}_s{seed}'
            f'_r{round_no:03d}.msg')


def run_experiment(config: ExperimentConfig,
                   idx_data: 'tuple[LabeledDataset, LabeledDataset]|None' = None,
                   dump_dir: 'str|Path|None' = None,
                   ) -> 'list[MetricsRow]':
    """Run every seed of a configuration.

    Args:
        config: A validated experiment configuration.
        idx_data: Preloaded (train, test) IDX datasets, read from the
            configured paths if None.
        dump_dir: If set, the decoded FedLog messages of every round are
            written there with `dump_messages`, one file per round.

    Returns:
        One row per seed and round, round 0 included.
    """
    if config.task == Task.IDX_IMAGES and idx_data is None:
        idx_data = _load_idx(config)
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        if config.algorithm != Algorithm.FEDLOG:
            _log.warning('Only FedLog rounds send statistics messages;'
                         ' nothing is dumped for %s',
                         config.algorithm.name.lower())
    round_fn = _ROUNDS[config.algorithm]
    options = RoundOptions(wire_float_bits=config.wire_float_bits,
                           privacy=config.privacy,
                           global_noise=config.global_noise,
                           map_tol=config.map_tol,
                           map_max_iters=config.map_max_iters,
                           client_fraction=config.client_fraction,
                           workers=config.workers)
    rows = []
    for seed in config.seeds:
        start = time.perf_counter()
        run = _setup(config, seed, idx_data)
        rows.append(_metrics_row(config, seed, run, 0, None,
                                 (time.perf_counter() - start) * 1000))
        for round_no in range(1, config.rounds + 1):
            start = time.perf_counter()
            result = round_fn(run.server, run.clients, options)
            if dump_dir is not None:
                _dump_round(dump_dir, config, seed, round_no, result)
            rows.append(_metrics_row(config, seed, run, round_no, result,
                                     (time.perf_counter() - start) * 1000))
        _log.info('%s seed %d local_epochs %d: test accuracy %.4f after %d'
                  ' rounds', config.algorithm.name.lower(), seed,
                  config.local_epochs, rows[-1].mean_test_accuracy,
                  config.rounds)
    return rows


def run_sweep(config: ExperimentConfig,
              algorithms: 'list[Algorithm]|None' = None,
              local_epochs_list: 'list[int]|None' = None,
              dump_dir: 'str|Path|None' = None,
              ) -> 'list[MetricsRow]':
    """Run a configuration for several algorithms and local epoch counts."""
    algorithms = algorithms or [config.algorithm]
    local_epochs_list = local_epochs_list or [config.local_epochs]
    idx_data = _load_idx(config) if config.task == Task.IDX_IMAGES else None
    rows = []
    for algorithm in algorithms:
        for local_epochs in local_epochs_list:
            variant = config.with_overrides(algorithm=algorithm,
                                            local_epochs=local_epochs)
            rows.extend(run_experiment(variant, idx_data, dump_dir))
    return rows


def _format(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def write_metrics(rows: 'list[MetricsRow]',
                  path: 'str|Path',
                  config: 'ExperimentConfig|None' = None) -> Path:
    """Write the metrics CSV and its JSON sidecar (same name, `.json`).

    The CSV holds only deterministic columns, so identical runs give
    identical bytes. Timing, the resolved configuration and the library
    version go to the sidecar.

    Returns:
        Path of the CSV file.

    Raises:
        `OSError` with the offending path if a file cannot be written.
    """
    path = Path(path)
    sidecar = {
        'version': package_version(),
        'created': ts_to_iso(time.time()),
        'config': config.as_dict() if config else None,
        'privacy': (ACCOUNTING_NOTE if config and config.epsilon is not None
                    else None),
        'wall_ms': [row.wall_ms for row in rows],
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(METRICS_COLUMNS)
            for row in rows:
                writer.writerow([_format(getattr(row, name))
                                 for name in METRICS_COLUMNS])
        path.with_suffix('.json').write_text(json.dumps(sidecar, indent=2),
                                             encoding='utf-8')
    except OSError as err:
        _log.error('Failed to write metrics to %s: %s', path, err)
        raise
    _log.info('Wrote %d metrics rows to %s', len(rows), path)
    return path


def _parse_value(name: str, text: str):
    kind = MetricsRow.__dataclass_fields__[name].type
    if kind in (bool, 'bool'):
        return text == 'true'
    if kind in (int, 'int'):
        return int(text)
    if kind in (float, 'float'):
        return float(text)
    return text


def read_metrics(path: 'str|Path') -> 'list[MetricsRow]':
    """Read a metrics CSV written by `write_metrics`.

    Raises:
        `ConfigError` if the header does not match the metrics columns.
    """
    path = Path(path)
    with path.open(newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ConfigError(f'{path} is not a metrics file')
        return [MetricsRow(**{k: _parse_value(k, v) for k, v in rec.items()})
                for rec in reader]


@dataclass
class RunSummary:
    """Final-round test accuracy of one (algorithm, local_epochs) over seeds."""
    algorithm: str
    local_epochs: int
    n_seeds: int
    mean: float
    stderr: float


@dataclass
class Comparison:
    """One-tailed test that `better` beats `worse` (paired by seed)."""
    local_epochs: int
    better: str
    worse: str
    n_pairs: int
    p_value: float
    undefined: bool = False

    @property
    def significant(self) -> bool:
        return not self.undefined and self.p_value < SIGNIFICANCE_LEVEL


def _final_accuracies(rows: 'list[MetricsRow]',
                      ) -> 'dict[tuple[str, int], dict[int, float]]':
    final: 'dict[tuple[str, int, int], MetricsRow]' = {}
    for row in rows:
        key = (row.algorithm, row.local_epochs, row.seed)
        if key not in final or row.round > final[key].round:
            final[key] = row
    grouped: 'dict[tuple[str, int], dict[int, float]]' = {}
    for (algorithm, local_epochs, seed), row in sorted(final.items()):
        grouped.setdefault((algorithm, local_epochs), {})[seed] = \
            row.mean_test_accuracy
    return grouped


def summarize_runs(rows: 'list[MetricsRow]',
                   ) -> 'tuple[list[RunSummary], list[Comparison]]':
    """Mean and standard error over seeds plus pairwise Wilcoxon tests."""
    grouped = _final_accuracies(rows)
    summaries = []
    for (algorithm, local_epochs), by_seed in grouped.items():
        values = np.array(list(by_seed.values()))
        stderr = (float(np.std(values, ddof=1) / math.sqrt(values.size))
                  if values.size > 1 else 0.0)
        summaries.append(RunSummary(algorithm, local_epochs, values.size,
                                    float(np.mean(values)), stderr))
    comparisons = []
    epochs = sorted({k[1] for k in grouped})
    for local_epochs in epochs:
        algorithms = sorted(a for a, e in grouped if e == local_epochs)
        for better, worse in permutations(algorithms, 2):
            a_runs = grouped[(better, local_epochs)]
            b_runs = grouped[(worse, local_epochs)]
            seeds = sorted(set(a_runs) & set(b_runs))
            if len(seeds) < 5:
                _log.warning('Only %d paired seeds for %s vs %s; skipping test',
                             len(seeds), better, worse)
                continue
            result = wilcoxon_one_tailed([a_runs[s] for s in seeds],
                                         [b_runs[s] for s in seeds])
            comparisons.append(Comparison(local_epochs, better, worse,
                                          len(seeds), result.p_value,
                                          result.undefined))
    return summaries, comparisons


def format_summary(summaries: 'list[RunSummary]',
                   comparisons: 'list[Comparison]') -> str:
    """Plain text report; significant comparisons are marked with `*`."""
    lines = ['algorithm      local_epochs  seeds  accuracy']
    for s in summaries:
        lines.append(f'{s.algorithm:<14} {s.local_epochs:>12}  {s.n_seeds:>5}'
                     f'  {s.mean:.4f} +/- {s.stderr:.4f}')
    if comparisons:
        lines.append('')
        lines.append(f'one-tailed Wilcoxon (* p < {SIGNIFICANCE_LEVEL})')
        for c in comparisons:
            mark = '*' if c.significant else ' '
            note = ' (all differences zero)' if c.undefined else ''
            lines.append(f'{c.better} > {c.worse} @ {c.local_epochs} epochs:'
                         f' p={c.p_value:.5f} {mark}{note}')
    return '\n'.join(lines)
