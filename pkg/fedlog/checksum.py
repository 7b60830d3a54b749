"""CRC-16/CCITT checksums for message dump records.

XModem polynomial with a 0xFFFF start value (the CCITT-FALSE variant), stored
big-endian after each frame.

"""
import logging
from functools import lru_cache

from .utils import vlog

POLYNOMIAL = 0x1021
INITIAL_VALUE = 0xFFFF
CRC_SIZE = 2
VLOG_TAG = 'checksum'

_log = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def _crc_table(polynomial: int = POLYNOMIAL) -> 'tuple[int, ...]':
    """Register value after shifting each possible leading byte through."""
    table = []
    for byte in range(256):
        register = byte << 8
        for _ in range(8):
            register <<= 1
            if register & 0x10000:
                register ^= polynomial
        table.append(register & 0xFFFF)
    return tuple(table)


def calculate_crc(data: bytes, initial_value: int = INITIAL_VALUE) -> int:
    """CRC of a byte string.

    Args:
        data: The bytes to check.
        initial_value: Register start value, to continue a running CRC.

    """
    table = _crc_table()
    crc = initial_value & 0xFFFF
    for byte in bytes(data):
        crc = ((crc << 8) & 0xFFFF) ^ table[(crc >> 8) ^ byte]
    return crc


def append_crc(frame: bytes) -> bytes:
    """The frame followed by its big-endian CRC."""
    crc = calculate_crc(frame)
    if vlog(VLOG_TAG):
        _log.debug('CRC %04X over %d bytes', crc, len(frame))
    return bytes(frame) + crc.to_bytes(CRC_SIZE, 'big')


def crc_matches(record: bytes) -> bool:
    """True if the trailing CRC of the record matches its leading frame."""
    if len(record) < CRC_SIZE:
        _log.warning('Record of %d bytes has no room for a CRC', len(record))
        return False
    received = int.from_bytes(record[-CRC_SIZE:], 'big')
    expected = calculate_crc(record[:-CRC_SIZE])
    if expected != received and vlog(VLOG_TAG):
        _log.debug('CRC mismatch: expected %04X received %04X',
                   expected, received)
    return expected == received
