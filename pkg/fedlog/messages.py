"""Round messages and their little-endian wire format.

A frame is a 13 byte header followed by m*n_class IEEE-754 values::

    u32 client_id | u32 count | u16 m | u16 n_class | u8 float_width | payload

The payload size depends only on (m, n_class, float_width), never on the
number of data points summarized. Dump files hold consecutive frames, each
followed by a CRC-16-CCITT of the frame.

"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .constants import WIRE_FLOAT_BITS, WIRE_HEADER_FORMAT
from .checksum import CRC_SIZE, append_crc, crc_matches
from .exception import ConfigError, CrcError, ProtocolError
from .expfam import SufficientStatistic
from .utils import vlog

VLOG_TAG = 'messages'
HEADER_SIZE = struct.calcsize(WIRE_HEADER_FORMAT)

_log = logging.getLogger(__name__)


@dataclass
class RoundMessage:
    """The only data a client ever transmits to the server.

    Attributes:
        client_id: Sender.
        stat_sum: Summed sufficient statistics of the client's training data.
        count: Number of training points summarized (n_c).
    """
    client_id: int
    stat_sum: SufficientStatistic
    count: int

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ProtocolError(f'Negative count {self.count}', self.client_id)


def _dtype(float_bits: int) -> str:
    if float_bits not in WIRE_FLOAT_BITS:
        raise ConfigError(f'Wire float width must be 32 or 64 (got {float_bits})')
    return '<f4' if float_bits == 32 else '<f8'


def message_size_bits(m: int, n_class: int, float_bits: int) -> int:
    """Payload bits of a head-sized message, m*n_class*float_bits."""
    if m < 1 or n_class < 1 or float_bits < 1:
        raise ConfigError('Message dimensions must be positive')
    return m * n_class * float_bits


def frame_size_bits(m: int, n_class: int, float_bits: int) -> int:
    """Total bits of a serialized frame, header included."""
    return HEADER_SIZE * 8 + message_size_bits(m, n_class, float_bits)


def wire_round(values: np.ndarray, float_bits: int) -> np.ndarray:
    """Values as they arrive after transmission at `float_bits` precision."""
    return np.asarray(values, dtype=_dtype(float_bits)).astype(np.float64)


def encode_frame(client_id: int,
                 count: int,
                 values: np.ndarray,
                 m: int,
                 n_class: int,
                 float_bits: int = 64) -> bytes:
    """Serialize a head-shaped vector with its header."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != m * n_class:
        raise ProtocolError(f'Payload has {values.size} values, expected'
                            f' {m * n_class}', client_id)
    try:
        header = struct.pack(WIRE_HEADER_FORMAT, client_id, count, m, n_class,
                             float_bits)
    except struct.error as err:
        raise ProtocolError(f'Header field out of range: {err}',
                            client_id) from err
    frame = header + values.astype(_dtype(float_bits)).tobytes()
    if vlog(VLOG_TAG):
        _log.debug('Encoded frame client=%d count=%d (%d bytes)',
                   client_id, count, len(frame))
    return frame


def decode_frame(frame: bytes) -> 'tuple[int, int, np.ndarray, int, int, int]':
    """Parse a frame into (client_id, count, values, m, n_class, float_bits).

    Raises:
        `ProtocolError` if the frame is truncated or malformed.
    """
    if len(frame) < HEADER_SIZE:
        raise ProtocolError(f'Frame of {len(frame)} bytes shorter than header')
    client_id, count, m, n_class, float_bits = struct.unpack_from(
        WIRE_HEADER_FORMAT, frame)
    try:
        dtype = _dtype(float_bits)
    except ConfigError as err:
        raise ProtocolError(str(err), client_id) from err
    expected = HEADER_SIZE + m * n_class * float_bits // 8
    if len(frame) != expected:
        raise ProtocolError(f'Frame has {len(frame)} bytes, expected {expected}',
                            client_id)
    values = np.frombuffer(frame, dtype=dtype, offset=HEADER_SIZE)
    return (client_id, count, values.astype(np.float64), m, n_class,
            float_bits)


def encode_message(message: RoundMessage, float_bits: int = 64) -> bytes:
    """Serialize a RoundMessage."""
    stat = message.stat_sum
    return encode_frame(message.client_id, message.count, stat.values,
                        stat.m, stat.n_class, float_bits)


def decode_message(frame: bytes) -> RoundMessage:
    """Parse a RoundMessage frame."""
    client_id, count, values, m, n_class, _ = decode_frame(frame)
    return RoundMessage(client_id, SufficientStatistic(values, m, n_class),
                        count)


def dump_messages(path: 'str|Path',
                  messages: 'Iterable[RoundMessage]',
                  float_bits: int = 64) -> int:
    """Write messages to a file, each frame followed by its CRC.

    Returns:
        Number of bytes written.
    """
    data = b''.join(append_crc(encode_message(msg, float_bits))
                    for msg in messages)
    Path(path).write_bytes(data)
    _log.debug('Dumped %d bytes of messages to %s', len(data), path)
    return len(data)


def load_messages(path: 'str|Path') -> 'list[RoundMessage]':
    """Read a message dump file.

    Raises:
        `CrcError` on a checksum mismatch, `ProtocolError` on truncation.
    """
    data = Path(path).read_bytes()
    messages = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < HEADER_SIZE:
            raise ProtocolError(f'Truncated header at offset {offset}')
        _, _, m, n_class, float_bits = struct.unpack_from(WIRE_HEADER_FORMAT,
                                                          data, offset)
        size = HEADER_SIZE + m * n_class * float_bits // 8
        record = data[offset:offset + size + CRC_SIZE]
        if len(record) != size + CRC_SIZE:
            raise ProtocolError(f'Truncated frame at offset {offset}')
        if not crc_matches(record):
            raise CrcError(f'CRC mismatch in frame at offset {offset}')
        messages.append(decode_message(record[:-CRC_SIZE]))
        offset += size + CRC_SIZE
    return messages
