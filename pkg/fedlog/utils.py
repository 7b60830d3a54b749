"""Various utilities/helpers for seeding, logging and formatting.
"""
import os
from datetime import datetime, timezone

import numpy as np


def vlog(tag: str) -> bool:
    """Returns True if the tag is in the LOG_VERBOSE environment variable."""
    if not isinstance(tag, str) or tag == '':
        return False
    return tag in str(os.getenv('LOG_VERBOSE'))


def ts_to_iso(timestamp: 'float|int', ms: bool = False) -> str:
    """Converts a unix timestamp to ISO 8601 format (UTC).
    
    Args:
        timestamp: A unix timestamp.
        ms: Flag indicating whether to include milliseconds in response
    
    Returns:
        ISO 8601 UTC format e.g. `YYYY-MM-DDThh:mm:ss[.sss]Z`

    """
    iso_time = datetime.fromtimestamp(timestamp, tz=timezone.utc).isoformat()
    if not ms:
        return f'{iso_time[:19]}Z'
    return f'{iso_time[:23]}Z'


def derive_rng(seed: 'int|None', *keys: int) -> np.random.Generator:
    """Get an independent PCG64 stream for a (seed, keys...) path.
    
    The same seed and keys always give the same stream, and distinct keys give
    statistically independent streams. A `None` seed draws fresh OS entropy.

    Args:
        seed: Root seed of the experiment, or None for an unseeded stream.
        *keys: Non-negative integers naming the consumer (e.g. purpose, client).
    
    """
    if seed is None:
        return np.random.default_rng()
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def parse_int_list(text: str) -> 'list[int]':
    """Parses a comma separated list of integers e.g. `0,1,2`."""
    return [int(x) for x in text.split(',') if x.strip() != '']


def format_float(value: float) -> str:
    """Shortest string that parses back to the identical float."""
    return repr(float(value))
