"""Constants for the fedlog package.
"""
from enum import IntEnum

MAP_TOL = 1e-6   # default infinity-norm gradient tolerance for the head MAP
MAP_MAX_ITERS = 10000
MAP_ARMIJO = 1e-4
MAP_INITIAL_STEP = 1.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DP_DELTA = 0.01   # default delta for the Gaussian mechanism
DP_CLIP_BOUND = 2.0   # default feature clip bound b

CIRCLE_HALF_WIDTH = 5.0   # synthetic points are uniform on [-5,5] x [-5,5]
CIRCLE_RADIUS = 26 / 7
CIRCLE_OUTSIDE = 1   # class id for points outside the circle
CIRCLE_INSIDE = 2
CIRCLE_TEST_PER_CLIENT = 400

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

WIRE_HEADER_FORMAT = '<IIHHB'   # client_id, count, m, n_class, float_width
WIRE_FLOAT_BITS = (32, 64)

MIN_WILCOXON_PAIRS = 5
WILCOXON_EXACT_MAX_N = 20
SIGNIFICANCE_LEVEL = 0.01


class Activation(IntEnum):
    """Element-wise activation applied after a dense layer.

    `CLAMP` clips to [-b, b]; `TANH` is the smooth bound `b * tanh(z / b)`.
    """
    IDENTITY = 0
    RELU = 1
    CLAMP = 2
    TANH = 3


class OptimizerKind(IntEnum):
    """Local body optimizers."""
    SGD = 0
    ADAM = 1


class Algorithm(IntEnum):
    """Federated algorithms available to the experiment runner."""
    FEDLOG = 0
    FEDAVG = 1
    LGFEDAVG1 = 2


class Task(IntEnum):
    """Experiment tasks."""
    SYNTHETIC_CIRCLE = 0
    IDX_IMAGES = 1


class ClientStatus(IntEnum):
    """Outcome of the most recent local operation of a client."""
    OK = 0
    PENDING = 1
    EMPTY_DATA = 2
    SKIPPED = 3   # not selected for the round
