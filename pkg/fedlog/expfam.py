"""Exponential-family model of the global head.

Features and labels are modelled by an exponential family with sufficient
statistic `T(phi, y) = e_y (x) phi` (block y of a length m*n_class vector holds
phi), base measure `exp(-|phi|^2) / sqrt(pi^m)` and cumulant
`A(eta) = ln sum_y exp(|eta_y|^2 / 4)`. The conjugate prior with parameters
(chi, nu) has kernel `exp(eta.chi - nu A(eta))`, so the posterior after
observing statistics with sum S and count n is the prior with
(chi + S, nu + n). The head used by every client is the MAP of that posterior.

The normalizer of the prior and the predictive posterior are intractable and
never computed; only the kernel is needed.

"""
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .constants import MAP_ARMIJO, MAP_INITIAL_STEP, MAP_MAX_ITERS, MAP_TOL
from .exception import ConfigError, InputError, ProtocolError
from .utils import vlog

VLOG_TAG = 'expfam'

_log = logging.getLogger(__name__)
_EPS = float(np.finfo(np.float64).eps)


def _check_dims(m: int, n_class: int) -> None:
    if m < 1 or n_class < 1:
        raise ConfigError(f'Invalid head dimensions m={m} n_class={n_class}')


@dataclass
class HeadParams:
    """Canonical parameters eta, n_class contiguous blocks of m values.

    Block y (1-based) occupies flat indices [(y-1)*m, y*m).
    """
    eta: np.ndarray
    m: int
    n_class: int

    def __post_init__(self) -> None:
        _check_dims(self.m, self.n_class)
        self.eta = np.asarray(self.eta, dtype=np.float64).reshape(-1)
        if self.eta.size != self.m * self.n_class:
            raise ConfigError(f'Head has {self.eta.size} values, expected'
                              f' {self.m * self.n_class}')
        if not np.all(np.isfinite(self.eta)):
            raise InputError('Head parameters must be finite')

    @property
    def blocks(self) -> np.ndarray:
        """View of eta as an (n_class, m) matrix, row y-1 is eta_y."""
        return self.eta.reshape(self.n_class, self.m)

    def block(self, y: int) -> np.ndarray:
        return self.blocks[y - 1]

    def copy(self) -> 'HeadParams':
        return HeadParams(self.eta.copy(), self.m, self.n_class)

    @classmethod
    def zeros(cls, m: int, n_class: int) -> 'HeadParams':
        return cls(np.zeros(m * n_class), m, n_class)

    @classmethod
    def random(cls, m: int, n_class: int, rng: np.random.Generator) -> 'HeadParams':
        """Uniform initialization in +/- 1/sqrt(m), like a linear layer."""
        _check_dims(m, n_class)
        limit = 1 / np.sqrt(m)
        return cls(rng.uniform(-limit, limit, size=m * n_class), m, n_class)


@dataclass
class SufficientStatistic:
    """A summed statistic `sum_i e_{y_i} (x) phi_i` of length m*n_class."""
    values: np.ndarray
    m: int
    n_class: int

    def __post_init__(self) -> None:
        _check_dims(self.m, self.n_class)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.m * self.n_class:
            raise ConfigError(f'Statistic has {self.values.size} values,'
                              f' expected {self.m * self.n_class}')

    def __add__(self, other: 'SufficientStatistic') -> 'SufficientStatistic':
        if (self.m, self.n_class) != (other.m, other.n_class):
            raise ProtocolError('Cannot add statistics of different shapes')
        return SufficientStatistic(self.values + other.values, self.m,
                                   self.n_class)

    @classmethod
    def zeros(cls, m: int, n_class: int) -> 'SufficientStatistic':
        return cls(np.zeros(m * n_class), m, n_class)


@dataclass
class PriorParams:
    """Conjugate prior parameters (chi, nu).

    The uninformative default is chi = 0, nu = 1.
    """
    chi: np.ndarray
    nu: float = 1.0

    def __post_init__(self) -> None:
        self.chi = np.asarray(self.chi, dtype=np.float64).reshape(-1)
        self.nu = float(self.nu)
        if not self.nu >= 1:
            raise ConfigError(f'Prior nu must be >= 1 (got {self.nu})')

    @classmethod
    def default(cls, m: int, n_class: int, nu: float = 1.0) -> 'PriorParams':
        _check_dims(m, n_class)
        return cls(np.zeros(m * n_class), nu)


@dataclass
class PosteriorParams:
    """Posterior parameters (chi + sum of statistics, nu + sum of counts)."""
    chi_post: np.ndarray
    nu_post: float


@dataclass
class MapResult:
    """Outcome of the MAP ascent.

    Attributes:
        head: The final iterate.
        converged: True if the gradient infinity-norm fell below tol.
        iterations: Number of accepted ascent steps.
        objective: Log posterior kernel at the final iterate.
    """
    head: HeadParams
    converged: bool
    iterations: int
    objective: float


def sufficient_statistic(phi: np.ndarray, y: int, n_class: int) -> SufficientStatistic:
    """The statistic of a single data point, `e_y (x) phi`.

    Raises:
        `InputError` if y is not in 1..n_class.
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if not 1 <= int(y) <= n_class:
        raise InputError(f'Label {y} not in 1..{n_class}')
    one_hot = np.zeros(n_class)
    one_hot[int(y) - 1] = 1.0
    return SufficientStatistic(np.kron(one_hot, phi), phi.size, n_class)


def batch_statistic(features: np.ndarray,
                    labels: np.ndarray,
                    n_class: int) -> SufficientStatistic:
    """Summed statistics of a batch of (phi_i, y_i).

    Args:
        features: Array (n, m).
        labels: Class ids in 1..n_class.
        n_class: Number of classes.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if features.ndim != 2 or features.shape[0] != labels.size:
        raise InputError(f'{features.shape[0]} features but {labels.size} labels')
    if labels.size and (labels.min() < 1 or labels.max() > n_class):
        raise InputError(f'Labels must be in 1..{n_class}')
    one_hot = np.zeros((labels.size, n_class))
    one_hot[np.arange(labels.size), labels - 1] = 1.0
    summed = one_hot.T @ features
    return SufficientStatistic(summed.reshape(-1), features.shape[1], n_class)


def cumulant(head: HeadParams) -> float:
    """A(eta) = ln sum_y exp(|eta_y|^2 / 4)."""
    return float(logsumexp(np.sum(head.blocks ** 2, axis=1) / 4))


def conditional_log_probs(head: HeadParams, phi: np.ndarray) -> np.ndarray:
    """Log softmax over the logits eta_y . phi.

    Args:
        head: The head.
        phi: A single feature vector (m,) or a batch (n, m).

    Returns:
        Array (n_class,) or (n, n_class) of log probabilities.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != head.m:
        raise ConfigError(f'Feature dimension {phi.shape[-1]} does not match'
                          f' head m={head.m}')
    return log_softmax(phi @ head.blocks.T, axis=-1)


def log_posterior_kernel(head: HeadParams,
                         chi_post: np.ndarray,
                         nu_post: float) -> float:
    """eta.(chi + S) - (nu + n) A(eta), the log kernel without its normalizer."""
    return float(head.eta @ chi_post - nu_post * cumulant(head))


def kernel_gradient(head: HeadParams,
                    chi_post: np.ndarray,
                    nu_post: float) -> np.ndarray:
    """Gradient of `log_posterior_kernel` with respect to eta.

    Block y is `(chi + S)_y - (nu + n) w_y eta_y / 2` where w is the softmax
    of the block norms `|eta_y|^2 / 4`.
    """
    blocks = head.blocks
    weights = softmax(np.sum(blocks ** 2, axis=1) / 4)
    return np.asarray(chi_post, dtype=np.float64) - nu_post * (
        weights[:, None] * blocks / 2).reshape(-1)


Message = Union['RoundMessage', Tuple[SufficientStatistic, int]]


def _unpack(messages: 'Sequence[Message]',
            ) -> 'list[tuple[SufficientStatistic, int, int|None]]':
    """Normalize to (statistic, count, client_id), sorted by id if all known."""
    unpacked = [(msg[0], int(msg[1]), None) if isinstance(msg, tuple)
                else (msg.stat_sum, int(msg.count), msg.client_id)
                for msg in messages]
    if unpacked and all(u[2] is not None for u in unpacked):
        unpacked.sort(key=lambda u: u[2])
    return unpacked


def posterior_update(prior: 'PriorParams|PosteriorParams',
                     messages: 'Iterable[Message]') -> PosteriorParams:
    """Add summed statistics and counts to the prior parameters.

    Messages carrying a `client_id` are summed in ascending client id order,
    so any permutation of the same messages gives bit-identical results.
    A `PosteriorParams` may be passed as the prior to update sequentially.

    Raises:
        `ProtocolError` if a statistic does not match the prior dimensions.
    """
    if isinstance(prior, PosteriorParams):
        chi, nu = prior.chi_post.copy(), prior.nu_post
    else:
        chi, nu = prior.chi.copy(), prior.nu
    for stat, count, client_id in _unpack(list(messages)):
        if stat.values.size != chi.size:
            raise ProtocolError(f'Statistic of length {stat.values.size} does'
                                f' not match prior length {chi.size}',
                                client_id)
        if count < 0:
            raise ProtocolError(f'Negative count {count}', client_id)
        chi = chi + stat.values
        nu = nu + count
    return PosteriorParams(chi, nu)


def map_estimate(posterior: PosteriorParams,
                 init: HeadParams,
                 tol: float = MAP_TOL,
                 max_iters: int = MAP_MAX_ITERS) -> MapResult:
    """Maximize the concave log posterior kernel by gradient ascent.

    Each step starts at step size 1 and halves it until the Armijo condition
    with constant 1e-4 holds. Near the optimum the objective change of a
    trial step can fall below floating point resolution (1e-13 relative to
    the objective); such a trial is accepted instead if it lowers the
    gradient infinity-norm. If no step size qualifies the search stops and
    the result is flagged as not converged. Iteration stops when the gradient infinity-norm
    is below `tol` or after `max_iters` steps, in which case the result is
    flagged as not converged.

    Args:
        posterior: Updated parameters (chi + S, nu + n).
        init: Starting head (warm start).
        tol: Gradient infinity-norm tolerance.
        max_iters: Maximum number of ascent steps.
    """
    if not tol > 0:
        raise ConfigError(f'MAP tolerance must be > 0 (got {tol})')
    chi_post = np.asarray(posterior.chi_post, dtype=np.float64)
    nu_post = float(posterior.nu_post)
    if chi_post.size != init.eta.size:
        raise ConfigError(f'Posterior length {chi_post.size} does not match'
                          f' head length {init.eta.size}')
    m, n_class = init.m, init.n_class
    eta = init.eta.copy()
    objective = log_posterior_kernel(init, chi_post, nu_post)
    iterations = 0
    converged = False
    while True:
        head = HeadParams(eta, m, n_class)
        grad = kernel_gradient(head, chi_post, nu_post)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < tol:
            converged = True
            break
        if iterations >= max_iters:
            break
        slope = float(grad @ grad)
        step = MAP_INITIAL_STEP
        resolution = 1e-13 * max(1.0, abs(objective))
        candidate = None
        while step * grad_norm >= _EPS * max(1.0, float(np.max(np.abs(eta)))):
            trial = eta + step * grad
            trial_head = HeadParams(trial, m, n_class)
            value = log_posterior_kernel(trial_head, chi_post, nu_post)
            if value >= objective + MAP_ARMIJO * step * slope:
                candidate = trial
                break
            if abs(value - objective) <= resolution:
                # objective differences below rounding: fall back to the
                # gradient norm as the progress measure
                trial_grad = kernel_gradient(trial_head, chi_post, nu_post)
                if np.max(np.abs(trial_grad)) < grad_norm:
                    candidate = trial
                    break
            step /= 2
        if candidate is None:
            _log.debug('MAP line search stalled at |grad|=%.3g', grad_norm)
            break
        eta, objective = candidate, value
        iterations += 1
        if vlog(VLOG_TAG):
            _log.debug('MAP iteration %d: step %.3g objective %.12g |grad| %.3g',
                       iterations, step, objective, grad_norm)
    if not converged:
        _log.warning('MAP did not converge after %d iterations (|grad|=%.3g)',
                     iterations, grad_norm)
    return MapResult(HeadParams(eta, m, n_class), converged, iterations,
                     objective)


def map_solve(prior: PriorParams,
              stat_sum: SufficientStatistic,
              n: int,
              init: 'HeadParams|None' = None,
              tol: float = MAP_TOL,
              max_iters: int = MAP_MAX_ITERS) -> MapResult:
    """MAP head for a prior updated with summed statistics `stat_sum` of n points.

    Args:
        prior: The conjugate prior.
        stat_sum: Summed statistics.
        n: Number of data points summarized.
        init: Starting head, zero if None.
        tol: Gradient infinity-norm tolerance.
        max_iters: Maximum number of ascent steps.
    """
    if init is None:
        init = HeadParams.zeros(stat_sum.m, stat_sum.n_class)
    posterior = posterior_update(prior, [(stat_sum, n)])
    return map_estimate(posterior, init, tol, max_iters)
