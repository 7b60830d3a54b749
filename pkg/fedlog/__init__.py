"""Personalized federated learning with a conjugate Bayesian global head.

Clients keep private feature extractors (bodies) and send only summed
sufficient statistics of their features; the server replaces the shared
linear head with the MAP of the conjugate posterior.
"""
from .constants import Algorithm, ClientStatus, Task
from .config import ExperimentConfig, load_config, parse_config_text
from .exception import (
    ConfigError,
    CrcError,
    FedLogException,
    IdxParseError,
    InputError,
    ProtocolError,
)
from .expfam import (
    HeadParams,
    PriorParams,
    SufficientStatistic,
    map_estimate,
    map_solve,
    posterior_update,
)
from .federation import (
    ClientState,
    RoundOptions,
    ServerState,
    evaluate,
    fedavg_aggregate,
    fedavg_round,
    fedlog_round,
    lgfedavg_round,
)
from .messages import RoundMessage, decode_message, encode_message
from .nn import BodyNetwork, TrainConfig
from .privacy import PrivacyParams, noise_sigma, privatize
from .runner import (
    MetricsRow,
    message_size_bits,
    read_metrics,
    run_experiment,
    write_metrics,
)
from .stats import wilcoxon_one_tailed

__all__ = [
    'Algorithm',
    'BodyNetwork',
    'ClientState',
    'ClientStatus',
    'ConfigError',
    'CrcError',
    'ExperimentConfig',
    'FedLogException',
    'HeadParams',
    'IdxParseError',
    'InputError',
    'MetricsRow',
    'PriorParams',
    'PrivacyParams',
    'ProtocolError',
    'RoundMessage',
    'RoundOptions',
    'ServerState',
    'SufficientStatistic',
    'Task',
    'TrainConfig',
    'decode_message',
    'encode_message',
    'evaluate',
    'fedavg_aggregate',
    'fedavg_round',
    'fedlog_round',
    'lgfedavg_round',
    'load_config',
    'map_estimate',
    'map_solve',
    'message_size_bits',
    'noise_sigma',
    'parse_config_text',
    'posterior_update',
    'privatize',
    'read_metrics',
    'run_experiment',
    'wilcoxon_one_tailed',
    'write_metrics',
]
