"""One-tailed Wilcoxon signed-rank test for paired per-seed results."""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .constants import MIN_WILCOXON_PAIRS, WILCOXON_EXACT_MAX_N
from .exception import InputError

_log = logging.getLogger(__name__)


@dataclass
class WilcoxonResult:
    """Outcome of `wilcoxon_one_tailed`.

    Attributes:
        p_value: Probability of a statistic at least as large under the null.
        statistic: Sum of the ranks of the positive differences (W+).
        n: Number of non-zero differences ranked.
        exact: True if the exact null distribution was used.
        undefined: True if every difference was zero (p reported as 1.0).
    """
    p_value: float
    statistic: float
    n: int
    exact: bool
    undefined: bool = False


def _exact_counts(doubled_ranks: 'list[int]') -> np.ndarray:
    """Number of sign patterns giving each value of the doubled W+."""
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_one_tailed(paired_a: 'list[float]|np.ndarray',
                        paired_b: 'list[float]|np.ndarray',
                        method: str = 'auto') -> WilcoxonResult:
    """Test the alternative that `a` tends to exceed `b`.

    Zero differences are dropped and tied magnitudes get average ranks. The
    exact null distribution over all 2^n sign patterns is used for n up to
    20 (or when `method='exact'`), the normal approximation with tie and
    continuity corrections otherwise.

    Args:
        paired_a: First sample.
        paired_b: Second sample, paired element-wise with the first.
        method: `auto`, `exact` or `approx`.

    Raises:
        `InputError` on unequal lengths or fewer than 5 pairs.
    """
    a = np.asarray(paired_a, dtype=np.float64).reshape(-1)
    b = np.asarray(paired_b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise InputError(f'Unequal sample sizes {a.size} and {b.size}')
    if a.size < MIN_WILCOXON_PAIRS:
        raise InputError(f'At least {MIN_WILCOXON_PAIRS} pairs required'
                         f' (got {a.size})')
    if method not in ('auto', 'exact', 'approx'):
        raise InputError(f'Unknown method {method}')
    diffs = a - b
    diffs = diffs[diffs != 0]
    n = int(diffs.size)
    if n == 0:
        _log.warning('All paired differences are zero; p-value undefined')
        return WilcoxonResult(1.0, 0.0, 0, method != 'approx', undefined=True)
    ranks = rankdata(np.abs(diffs))
    w_plus = float(np.sum(ranks[diffs > 0]))
    exact = method == 'exact' or (method == 'auto' and n <= WILCOXON_EXACT_MAX_N)
    if exact:
        # average ranks are multiples of 1/2
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _exact_counts(doubled)
        observed = int(round(2 * w_plus))
        p_value = float(np.sum(counts[observed:]) / 2.0 ** n)
    else:
        mean = n * (n + 1) / 4
        _, tie_sizes = np.unique(ranks, return_counts=True)
        tie_term = float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48
        variance = n * (n + 1) * (2 * n + 1) / 24 - tie_term
        z = (w_plus - mean - 0.5) / math.sqrt(variance)
        p_value = float(norm.sf(z))
    return WilcoxonResult(min(p_value, 1.0), w_plus, n, exact)
