"""Datasets, client partitioning and IDX ingestion.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constants import (
    CIRCLE_HALF_WIDTH,
    CIRCLE_INSIDE,
    CIRCLE_OUTSIDE,
    CIRCLE_RADIUS,
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
)
from .exception import ConfigError, IdxParseError, InputError
from .utils import vlog

VLOG_TAG = 'data'
IDX_MAX_ITEMS = 2 ** 31 - 1

_log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    """Inputs with class ids in 1..n_class.

    Attributes:
        inputs: Array (n, p).
        labels: Integer array (n,).
        n_class: Number of classes.
    """
    inputs: np.ndarray
    labels: np.ndarray
    n_class: int

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(-1, 1)
        self.labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.size:
            raise InputError(f'{self.inputs.shape[0]} inputs but'
                             f' {self.labels.size} labels')
        if self.labels.size and (self.labels.min() < 1 or
                                 self.labels.max() > self.n_class):
            raise InputError(f'Labels must be in 1..{self.n_class}')

    def __len__(self) -> int:
        return self.labels.size

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def classes(self) -> 'set[int]':
        return set(int(y) for y in np.unique(self.labels))

    def subset(self, indices: np.ndarray) -> 'LabeledDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[indices], self.labels[indices],
                              self.n_class)

    @classmethod
    def empty(cls, input_dim: int, n_class: int) -> 'LabeledDataset':
        return cls(np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64),
                   n_class)


@dataclass
class PartitionSpec:
    """How to deal label-sorted shards to clients."""
    n_clients: int
    classes_per_client: int
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.n_clients < 1:
            errors.append(f'n_clients must be >= 1 (got {self.n_clients})')
        if self.classes_per_client < 1:
            errors.append('classes_per_client must be >= 1'
                          f' (got {self.classes_per_client})')
        if errors:
            raise ConfigError('; '.join(errors), errors)

    @property
    def n_shards(self) -> int:
        return self.n_clients * self.classes_per_client


def circle_labels(points: np.ndarray) -> np.ndarray:
    """Class ids for 2-D points: inside the circle is `CIRCLE_INSIDE`."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    inside = np.sum(points ** 2, axis=1) < CIRCLE_RADIUS ** 2
    return np.where(inside, CIRCLE_INSIDE, CIRCLE_OUTSIDE)


def gen_circle(n: int, seed: 'int|np.random.Generator') -> LabeledDataset:
    """Points uniform on the square [-5,5]^2 labelled by the centred circle.

    Args:
        n: Number of points (>= 1).
        seed: Seed or generator.
    """
    if n < 1:
        raise InputError(f'n must be >= 1 (got {n})')
    rng = np.random.default_rng(seed)
    points = rng.uniform(-CIRCLE_HALF_WIDTH, CIRCLE_HALF_WIDTH, size=(n, 2))
    return LabeledDataset(points, circle_labels(points), 2)


def split_by_sorted_x1(dataset: LabeledDataset,
                       ) -> 'tuple[LabeledDataset, LabeledDataset]':
    """Split into two clients by ordered first coordinate.

    Raises:
        `InputError` if the dataset size is odd.
    """
    n = len(dataset)
    if n % 2:
        raise InputError(f'Cannot split {n} points evenly')
    order = np.argsort(dataset.inputs[:, 0], kind='stable')
    return dataset.subset(order[:n // 2]), dataset.subset(order[n // 2:])


def split_threshold(first: LabeledDataset, second: LabeledDataset) -> float:
    """The x1 value halfway between two sorted-x1 client splits."""
    return float((first.inputs[:, 0].max() + second.inputs[:, 0].min()) / 2)


def circle_test_sets(n_per_client: int,
                     threshold: float,
                     seed: 'int|np.random.Generator',
                     ) -> 'tuple[LabeledDataset, LabeledDataset]':
    """Fresh circle points for two clients split at `threshold` on x1.

    Client 0 receives points with x1 <= threshold, client 1 the rest, so test
    data follows each client's training distribution.
    """
    if n_per_client < 1:
        raise InputError(f'n_per_client must be >= 1 (got {n_per_client})')
    if not -CIRCLE_HALF_WIDTH < threshold < CIRCLE_HALF_WIDTH:
        raise InputError(f'Threshold {threshold} outside the sampling square')
    rng = np.random.default_rng(seed)
    pools: 'list[list[np.ndarray]]' = [[], []]
    counts = [0, 0]
    while min(counts) < n_per_client:
        points = rng.uniform(-CIRCLE_HALF_WIDTH, CIRCLE_HALF_WIDTH,
                             size=(4 * n_per_client, 2))
        left = points[:, 0] <= threshold
        for side, chunk in enumerate((points[left], points[~left])):
            take = chunk[:n_per_client - counts[side]]
            pools[side].append(take)
            counts[side] += len(take)
    sets = []
    for side in range(2):
        points = np.vstack(pools[side])
        sets.append(LabeledDataset(points, circle_labels(points), 2))
    return sets[0], sets[1]


def _cut_shards(dataset: LabeledDataset, n_shards: int) -> 'list[np.ndarray]':
    """Label-sorted contiguous shards, cut within classes when possible."""
    order = np.argsort(dataset.labels, kind='stable')
    classes = np.unique(dataset.labels)
    if n_shards % classes.size == 0:
        per_class = n_shards // classes.size
        shards = []
        for y in classes:
            members = order[dataset.labels[order] == y]
            if members.size < per_class:
                raise InputError(f'Class {y} has {members.size} points for'
                                 f' {per_class} shards')
            shards.extend(np.array_split(members, per_class))
        return shards
    _log.warning('%d shards do not divide %d classes evenly: shards may'
                 ' straddle classes', n_shards, classes.size)
    return list(np.array_split(order, n_shards))


def shard_partition(dataset: LabeledDataset,
                    spec: PartitionSpec) -> 'list[LabeledDataset]':
    """Deal label-sorted shards so each client gets `classes_per_client` shards.

    Every point is assigned exactly once. Shards are contiguous runs of the
    label-sorted data; the shard order is shuffled with `spec.seed`.

    Raises:
        `InputError` if there are fewer points than shards.
    """
    if len(dataset) < spec.n_shards:
        raise InputError(f'{len(dataset)} points cannot fill {spec.n_shards}'
                         ' shards')
    shards = _cut_shards(dataset, spec.n_shards)
    deal = np.random.default_rng(spec.seed).permutation(spec.n_shards)
    k = spec.classes_per_client
    parts = []
    for c in range(spec.n_clients):
        members = np.concatenate([shards[s] for s in deal[c * k:(c + 1) * k]])
        parts.append(dataset.subset(np.sort(members)))
        if vlog(VLOG_TAG):
            _log.debug('Client %d: %d points classes %s', c, len(members),
                       sorted(parts[-1].classes))
    return parts


def stratified_subsample(dataset: LabeledDataset,
                         fraction: float,
                         seed: 'int|np.random.Generator') -> LabeledDataset:
    """Seeded uniform subsample of `fraction` of every class (at least 1 each)."""
    if not 0 < fraction <= 1:
        raise InputError(f'fraction must be in (0, 1] (got {fraction})')
    rng = np.random.default_rng(seed)
    chosen = []
    for y in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == y)
        size = max(1, int(round(fraction * members.size)))
        chosen.append(rng.choice(members, size=size, replace=False))
    return dataset.subset(np.sort(np.concatenate(chosen)))


def partition_like(test: LabeledDataset,
                   train_parts: 'list[LabeledDataset]',
                   seed: 'int|np.random.Generator') -> 'list[LabeledDataset]':
    """Split a test set so each client sees the classes it trains on.

    Test points of a class are shared among the clients holding that class in
    proportion to how many training points of it they hold. Classes no client
    trains on are dropped.
    """
    rng = np.random.default_rng(seed)
    assigned: 'list[list[np.ndarray]]' = [[] for _ in train_parts]
    for y in np.unique(test.labels):
        holders = np.array([np.sum(part.labels == y) for part in train_parts],
                           dtype=np.float64)
        if holders.sum() == 0:
            _log.debug('No client trains on class %d; dropping its test points', y)
            continue
        members = rng.permutation(np.flatnonzero(test.labels == y))
        bounds = np.round(np.cumsum(holders) / holders.sum()
                          * members.size).astype(np.int64)
        start = 0
        for c, stop in enumerate(bounds):
            assigned[c].append(members[start:stop])
            start = stop
    parts = []
    for chunks in assigned:
        indices = (np.sort(np.concatenate(chunks)) if chunks
                   else np.zeros(0, dtype=np.int64))
        parts.append(test.subset(indices))
    return parts


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX stream of unsigned bytes.

    Accepts label files (magic 0x00000801, 1-D) and image files
    (magic 0x00000803, 3-D). Dimension sizes are big-endian u32.

    Returns:
        A uint8 array with the declared shape.

    Raises:
        `IdxParseError` with the byte offset of the problem.
    """
    data = bytes(data)
    if len(data) < 4:
        raise IdxParseError('Truncated magic number', len(data))
    (magic,) = struct.unpack_from('>I', data, 0)
    if magic not in (IDX_LABEL_MAGIC, IDX_IMAGE_MAGIC):
        raise IdxParseError(f'Bad magic number 0x{magic:08X}', 0)
    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise IdxParseError('Truncated dimension sizes', len(data))
    shape = struct.unpack_from(f'>{ndim}I', data, 4)
    size = 1
    for i, dim in enumerate(shape):
        size *= dim
        if size > IDX_MAX_ITEMS:
            raise IdxParseError(f'Dimension overflow ({shape})', 4 + 4 * i)
    end = header_size + size
    if len(data) < end:
        raise IdxParseError(f'Payload truncated: {len(data) - header_size} of'
                            f' {size} bytes', len(data))
    if len(data) > end:
        raise IdxParseError(f'{len(data) - end} trailing bytes', end)
    payload = np.frombuffer(data, dtype=np.uint8, count=size,
                            offset=header_size)
    if vlog(VLOG_TAG):
        _log.debug('Parsed IDX magic 0x%08X shape %s', magic, shape)
    return payload.reshape(shape)


def serialize_idx(array: np.ndarray) -> bytes:
    """Encode a 1-D or 3-D uint8 array as an IDX stream."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InputError(f'IDX payload must be uint8 (got {array.dtype})')
    magics = {1: IDX_LABEL_MAGIC, 3: IDX_IMAGE_MAGIC}
    if array.ndim not in magics:
        raise InputError(f'Only 1-D and 3-D arrays are supported'
                         f' (got {array.ndim}-D)')
    header = struct.pack(f'>I{array.ndim}I', magics[array.ndim], *array.shape)
    return header + array.tobytes()


def load_idx_dataset(images_path: 'str|Path',
                     labels_path: 'str|Path',
                     n_class: int = 10) -> LabeledDataset:
    """Read an image/label IDX pair as a dataset.

    Images are flattened and rescaled to [0, 1]; digit labels 0..n_class-1
    become class ids 1..n_class.
    """
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    if images.ndim != 3 or labels.ndim != 1:
        raise InputError('Expected a 3-D image file and a 1-D label file')
    if images.shape[0] != labels.shape[0]:
        raise InputError(f'{images.shape[0]} images but {labels.shape[0]}'
                         ' labels')
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    _log.info('Loaded %d images of %dx%d from %s', images.shape[0],
              images.shape[1], images.shape[2], images_path)
    return LabeledDataset(inputs, labels.astype(np.int64) + 1, n_class)
