"""Gaussian mechanism for differentially private round messages.

With every learned feature clipped to [-b, b] and one constant feature equal to
1, a single data point changes a summed statistic by at most
`sqrt(1 + (m-1) b^2)` in L2. Adding N(0, sigma^2 I) to the statistic with
`sigma = sqrt(2 (1 + (m-1) b^2) ln(1.25/delta)) / epsilon` makes each message
(epsilon, delta)-DP. The guarantee is per message; composition across rounds
is not accounted.

Noise comes from numpy's PCG64 generator through its standard normal sampler.
Seeded generators are for reproducible tests; `client_noise_rng(None, ...)`
draws OS entropy and is the default for real runs.

"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .constants import DP_CLIP_BOUND, DP_DELTA
from .exception import ConfigError, InputError
from .expfam import SufficientStatistic
from .messages import RoundMessage
from .utils import derive_rng, vlog

VLOG_TAG = 'privacy'
NOISE_STREAM = 7   # derive_rng key reserved for DP noise

ACCOUNTING_NOTE = ('per-message (epsilon, delta) only; composition over'
                   ' rounds is not accounted')

_log = logging.getLogger(__name__)


@dataclass
class PrivacyParams:
    """Differential privacy settings.

    Attributes:
        epsilon: Privacy budget per message, > 0.
        delta: Failure probability in (0, 1).
        clip_bound: Feature clip bound b used by the body's final clamp.
    """
    epsilon: float
    delta: float = DP_DELTA
    clip_bound: float = DP_CLIP_BOUND

    def __post_init__(self) -> None:
        errors = []
        if not self.epsilon > 0:
            errors.append(f'epsilon must be > 0 (got {self.epsilon})')
        if not 0 < self.delta < 1:
            errors.append(f'delta must be in (0, 1) (got {self.delta})')
        if not self.clip_bound > 0:
            errors.append(f'clip_bound must be > 0 (got {self.clip_bound})')
        if errors:
            raise ConfigError('; '.join(errors), errors)


def l2_sensitivity(m: int, b: float) -> float:
    """L2 sensitivity of the summed statistic, sqrt(1 + (m-1) b^2).

    Raises:
        `InputError` if m < 2 (one feature is the constant slot) or b <= 0.
    """
    if m < 2:
        raise InputError(f'm must be >= 2 (got {m})')
    if not b > 0:
        raise InputError(f'b must be > 0 (got {b})')
    return math.sqrt(1 + (m - 1) * b * b)


def noise_sigma(privacy: PrivacyParams, m: int) -> float:
    """Gaussian noise scale that makes one message (epsilon, delta)-DP."""
    sensitivity = l2_sensitivity(m, privacy.clip_bound)
    return (math.sqrt(2 * sensitivity ** 2 * math.log(1.25 / privacy.delta))
            / privacy.epsilon)


def client_noise_rng(seed: 'int|None', client_id: int) -> np.random.Generator:
    """Noise stream owned by one client; entropy seeded when seed is None."""
    return derive_rng(seed, NOISE_STREAM, client_id)


def privatize_statistic(stat_sum: SufficientStatistic,
                        sigma: float,
                        rng: np.random.Generator) -> SufficientStatistic:
    """Add i.i.d. N(0, sigma^2) noise to every coordinate of a statistic."""
    if sigma < 0:
        raise InputError(f'sigma must be >= 0 (got {sigma})')
    if sigma == 0:
        return SufficientStatistic(stat_sum.values.copy(), stat_sum.m,
                                   stat_sum.n_class)
    noise = sigma * rng.standard_normal(stat_sum.values.size)
    if vlog(VLOG_TAG):
        _log.debug('Adding noise sigma=%.4g to %d coordinates',
                   sigma, noise.size)
    return SufficientStatistic(stat_sum.values + noise, stat_sum.m,
                               stat_sum.n_class)


def privatize(message: RoundMessage,
              sigma: float,
              rng: np.random.Generator) -> RoundMessage:
    """Gaussian mechanism on a round message; the count passes unmodified."""
    return RoundMessage(message.client_id,
                        privatize_statistic(message.stat_sum, sigma, rng),
                        message.count)
