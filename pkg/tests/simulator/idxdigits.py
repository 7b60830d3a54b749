#!/usr/bin/env python
"""A tiny stand-in for MNIST written as IDX files.

Each class lights a different band of pixels in an otherwise noisy image, so
the classes are easy to separate with a dense body.

"""
import logging
import os
from pathlib import Path

import numpy as np

from fedlog.data import serialize_idx

IMAGE_SIZE = int(os.getenv('SIM_IMAGE_SIZE', '6'))
N_CLASS = 10

TRAIN_IMAGES = 'train-images-idx3-ubyte'
TRAIN_LABELS = 'train-labels-idx1-ubyte'
TEST_IMAGES = 't10k-images-idx3-ubyte'
TEST_LABELS = 't10k-labels-idx1-ubyte'

_log = logging.getLogger(__name__)


def make_digits(n: int, seed: int) -> 'tuple[np.ndarray, np.ndarray]':
    """Images (n, size, size) and digit labels 0..9 as uint8 arrays."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % N_CLASS
    rng.shuffle(labels)
    images = rng.integers(0, 60, size=(n, IMAGE_SIZE, IMAGE_SIZE))
    flat = images.reshape(n, -1)
    band = max(1, flat.shape[1] // N_CLASS)
    for i, digit in enumerate(labels):
        flat[i, digit * band:(digit + 1) * band] += 180
    return flat.reshape(images.shape).astype(np.uint8), labels.astype(np.uint8)


def write_digits(directory: 'str|Path',
                 n_train: int = 2000,
                 n_test: int = 500,
                 seed: int = 0) -> Path:
    """Write train and test IDX pairs with the standard MNIST file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (images_name, labels_name), n, offset in (
            ((TRAIN_IMAGES, TRAIN_LABELS), n_train, 0),
            ((TEST_IMAGES, TEST_LABELS), n_test, 1)):
        images, labels = make_digits(n, seed + offset)
        (directory / images_name).write_bytes(serialize_idx(images))
        (directory / labels_name).write_bytes(serialize_idx(labels))
    _log.debug('Wrote simulated digits to %s', directory)
    return directory
