"""Experiment configuration files.

A configuration file is a flat list of `key = value` lines. Blank lines and
anything after `#` are ignored, list values are comma separated and body
architecture groups are separated by `;`::

    task = synthetic_circle
    algorithm = fedlog
    rounds = 1
    body_hidden = 16,16; 16     # client c uses group c % 2
    seeds = 0,1,2,3,4,5
    epsilon = none

Environment defaults (read from a `.env` file if present):

* `FEDLOG_OUT_DIR` output directory of the CLI (`results`)
* `FEDLOG_DATA_DIR` base directory for relative IDX paths
* `FEDLOG_WORKERS` client threads per round (1)

"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

from dotenv import load_dotenv

from .constants import (
    CIRCLE_TEST_PER_CLIENT,
    DP_CLIP_BOUND,
    DP_DELTA,
    MAP_MAX_ITERS,
    MAP_TOL,
    WIRE_FLOAT_BITS,
    Algorithm,
    OptimizerKind,
    Task,
)
from .exception import ConfigError
from .nn import TrainConfig
from .privacy import PrivacyParams

load_dotenv()

_log = logging.getLogger(__name__)

TRUE_VALUES = ('1', 'true', 'yes', 'on')
FALSE_VALUES = ('0', 'false', 'no', 'off')


def default_out_dir() -> str:
    return os.getenv('FEDLOG_OUT_DIR', 'results')


def default_workers() -> int:
    try:
        return int(os.getenv('FEDLOG_WORKERS', '1'))
    except ValueError:
        _log.warning('Ignoring invalid FEDLOG_WORKERS=%s',
                     os.getenv('FEDLOG_WORKERS'))
        return 1


def resolve_data_path(path: str) -> Path:
    """Relative paths are taken from `FEDLOG_DATA_DIR` when it is set."""
    resolved = Path(path).expanduser()
    base = os.getenv('FEDLOG_DATA_DIR')
    if base and not resolved.is_absolute():
        resolved = Path(base).expanduser() / resolved
    return resolved


@dataclass
class ExperimentConfig:
    """A complete, validated experiment description.

    Construction validates every field and raises a single `ConfigError`
    listing all problems found.
    """
    task: Task = Task.SYNTHETIC_CIRCLE
    algorithm: Algorithm = Algorithm.FEDLOG
    rounds: int = 1
    local_epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.001
    optimizer: OptimizerKind = OptimizerKind.ADAM
    map_tol: float = MAP_TOL
    map_max_iters: int = MAP_MAX_ITERS
    n_clients: int = 2
    classes_per_client: int = 2
    feature_dim: int = 3
    body_hidden: 'list[list[int]]' = field(
        default_factory=lambda: [[16, 16], [16]])
    feature_bound: 'float|None' = None
    n_class: int = 10
    n_train: int = 80
    n_test_per_client: int = CIRCLE_TEST_PER_CLIENT
    train_fraction: float = 0.05
    train_images: str = ''
    train_labels: str = ''
    test_images: str = ''
    test_labels: str = ''
    epsilon: 'float|None' = None
    delta: float = DP_DELTA
    clip_bound: float = DP_CLIP_BOUND
    global_noise: bool = False
    dp_seeded_noise: bool = False
    wire_float_bits: int = 64
    seeds: 'list[int]' = field(default_factory=lambda: [0])
    prior_nu: float = 1.0
    client_fraction: float = 1.0
    workers: int = field(default_factory=default_workers)

    def __post_init__(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigError('Invalid configuration: ' + '; '.join(errors),
                              errors)

    def validate(self) -> 'list[str]':
        """Every violated field, empty if the configuration is valid."""
        errors = []
        positive = ('batch_size', 'n_clients', 'classes_per_client',
                    'n_test_per_client', 'workers')
        for name in positive:
            if getattr(self, name) < 1:
                errors.append(f'{name} must be >= 1 (got {getattr(self, name)})')
        for name in ('rounds', 'local_epochs', 'map_max_iters'):
            if getattr(self, name) < 0:
                errors.append(f'{name} must be >= 0 (got {getattr(self, name)})')
        for name in ('learning_rate', 'map_tol', 'clip_bound'):
            if not getattr(self, name) > 0:
                errors.append(f'{name} must be > 0 (got {getattr(self, name)})')
        if self.feature_dim < 2:
            errors.append(f'feature_dim must be >= 2 (got {self.feature_dim})')
        if not self.body_hidden or any(
                w < 1 for group in self.body_hidden for w in group):
            errors.append('body_hidden needs at least one group of positive'
                          ' widths')
        if self.feature_bound is not None:
            if not self.feature_bound > 0:
                errors.append(f'feature_bound must be > 0'
                              f' (got {self.feature_bound})')
            elif (self.epsilon is not None
                  and self.feature_bound != self.clip_bound):
                errors.append('feature_bound must equal clip_bound when'
                              ' epsilon is set')
        if self.epsilon is not None and not self.epsilon > 0:
            errors.append(f'epsilon must be > 0 (got {self.epsilon})')
        if not 0 < self.delta < 1:
            errors.append(f'delta must be in (0, 1) (got {self.delta})')
        if self.global_noise and self.epsilon is None:
            errors.append('global_noise requires epsilon')
        if self.wire_float_bits not in WIRE_FLOAT_BITS:
            errors.append('wire_float_bits must be 32 or 64'
                          f' (got {self.wire_float_bits})')
        if not self.seeds:
            errors.append('seeds must list at least one seed')
        if len(set(self.seeds)) != len(self.seeds):
            errors.append(f'seeds must be unique (got {self.seeds})')
        if not self.prior_nu >= 1:
            errors.append(f'prior_nu must be >= 1 (got {self.prior_nu})')
        if not 0 < self.client_fraction <= 1:
            errors.append('client_fraction must be in (0, 1]'
                          f' (got {self.client_fraction})')
        if self.algorithm == Algorithm.FEDAVG and len(self.body_hidden) > 1:
            errors.append('fedavg needs one body architecture'
                          ' (body_hidden has several groups)')
        if self.task == Task.SYNTHETIC_CIRCLE:
            if self.n_clients != 2:
                errors.append('synthetic_circle uses exactly 2 clients'
                              f' (got n_clients={self.n_clients})')
            if self.n_train < 2 or self.n_train % 2:
                errors.append(f'n_train must be even and >= 2 (got {self.n_train})')
        else:
            for name in ('train_images', 'train_labels', 'test_images',
                         'test_labels'):
                if not getattr(self, name):
                    errors.append(f'{name} is required for idx_images')
            if self.n_class < 2:
                errors.append(f'n_class must be >= 2 (got {self.n_class})')
            if self.classes_per_client > self.n_class:
                errors.append('classes_per_client exceeds n_class')
            if not 0 < self.train_fraction <= 1:
                errors.append('train_fraction must be in (0, 1]'
                              f' (got {self.train_fraction})')
        return errors

    @property
    def n_classes(self) -> int:
        """Classes of the task (the synthetic circle has two)."""
        return 2 if self.task == Task.SYNTHETIC_CIRCLE else self.n_class

    @property
    def privacy(self) -> 'PrivacyParams|None':
        if self.epsilon is None:
            return None
        return PrivacyParams(self.epsilon, self.delta, self.clip_bound)

    def hidden_for(self, client_id: int) -> 'list[int]':
        """Hidden widths of a client's body, groups assigned round-robin."""
        return list(self.body_hidden[client_id % len(self.body_hidden)])

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate,
                           batch_size=self.batch_size,
                           local_epochs=self.local_epochs,
                           optimizer=self.optimizer)

    def as_dict(self) -> 'dict[str, Any]':
        """JSON friendly view, enum values by their config names."""
        result = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (Task, Algorithm, OptimizerKind)):
                value = value.name.lower()
            elif isinstance(value, list):
                value = [list(v) if isinstance(v, list) else v for v in value]
            result[f.name] = value
        return result

    def with_overrides(self, **overrides: Any) -> 'ExperimentConfig':
        return replace(self, **overrides)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in TRUE_VALUES:
        return True
    if lowered in FALSE_VALUES:
        return False
    raise ValueError(f'not a boolean: {text}')


def _parse_optional_float(text: str) -> 'float|None':
    if text.lower() in ('', 'none', 'off'):
        return None
    return float(text)


def _parse_int_list(text: str) -> 'list[int]':
    return [int(v) for v in text.split(',') if v.strip()]


def _parse_groups(text: str) -> 'list[list[int]]':
    return [_parse_int_list(group) for group in text.split(';')]


def _enum_parser(enum_cls) -> 'Callable[[str], Any]':
    def parse(text: str):
        try:
            return enum_cls[text.strip().upper()]
        except KeyError as err:
            choices = ', '.join(m.name.lower() for m in enum_cls)
            raise ValueError(f'expected one of {choices}') from err
    return parse


_PARSERS: 'dict[str, Callable[[str], Any]]' = {
    'task': _enum_parser(Task),
    'algorithm': _enum_parser(Algorithm),
    'optimizer': _enum_parser(OptimizerKind),
    'body_hidden': _parse_groups,
    'seeds': _parse_int_list,
    'epsilon': _parse_optional_float,
    'feature_bound': _parse_optional_float,
    'global_noise': _parse_bool,
    'dp_seeded_noise': _parse_bool,
}


def _parser_for(f) -> 'Callable[[str], Any]':
    if f.name in _PARSERS:
        return _PARSERS[f.name]
    if f.type in (int, 'int'):
        return int
    if f.type in (float, 'float'):
        return float
    return str


def parse_config_entries(text: str) -> 'dict[str, str]':
    """Raw `key = value` entries of a configuration text.

    Raises:
        `ConfigError` listing malformed lines, unknown and repeated keys.
    """
    known = {f.name for f in fields(ExperimentConfig)}
    entries: 'dict[str, str]' = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            errors.append(f'line {lineno}: expected key = value')
            continue
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in known:
            errors.append(f'line {lineno}: unknown key {key}')
        elif key in entries:
            errors.append(f'line {lineno}: repeated key {key}')
        else:
            entries[key] = value
    if errors:
        raise ConfigError('Invalid configuration: ' + '; '.join(errors), errors)
    return entries


def build_config(entries: 'dict[str, Any]') -> ExperimentConfig:
    """Convert raw entries (strings or typed values) into a config.

    Raises:
        `ConfigError` listing every field that fails to convert or validate.
    """
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    errors = []
    for key, raw in entries.items():
        if key not in by_name:
            errors.append(f'unknown key {key}')
            continue
        if not isinstance(raw, str):
            values[key] = raw
            continue
        try:
            values[key] = _parser_for(by_name[key])(raw.strip())
        except ValueError as err:
            errors.append(f'{key}: invalid value {raw!r} ({err})')
    if errors:
        raise ConfigError('Invalid configuration: ' + '; '.join(errors), errors)
    return ExperimentConfig(**values)


def parse_config_text(text: str,
                      overrides: 'dict[str, Any]|None' = None,
                      ) -> ExperimentConfig:
    """Parse a configuration text, `overrides` taking precedence."""
    entries: 'dict[str, Any]' = dict(parse_config_entries(text))
    entries.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(entries)


def load_config(path: 'str|Path',
                overrides: 'dict[str, Any]|None' = None) -> ExperimentConfig:
    """Read and validate a configuration file.

    Raises:
        `ConfigError` if the file cannot be read or is invalid.
    """
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as err:
        raise ConfigError(f'Cannot read configuration {path}: {err}') from err
    config = parse_config_text(text, overrides)
    _log.debug('Loaded configuration %s', path)
    return config
