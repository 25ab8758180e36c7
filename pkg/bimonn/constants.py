# Copyright 2023 Viktor Karlquist <vkarlqui@gmail.com>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Project wide constants."""

import math
from enum import Enum

####################################################################################################
# Smooth threshold
####################################################################################################

SATURATION_LEVEL = 0.95  # h, output level reached one standard deviation away from the bias
DUAL_SCALE = 2.0 * math.atanh(2.0 * SATURATION_LEVEL - 1.0)  # K = 2 * xi^-1(h)
SOFTPLUS_INVERSE_FLOOR = 1e-10
BCE_CLIP = 1e-7


class WeightMode(str, Enum):
    """Weight reparametrizations."""

    IDENTITY = "identity"
    POSITIVE = "positive"
    DUAL = "dual"


class BiasMode(str, Enum):
    """Bias reparametrizations."""

    IDENTITY = "identity"
    POSITIVE = "positive"
    PROJECTED = "projected"
    PROJECTED_REPARAM = "projected_reparam"


class LayerKind(str, Enum):
    """Layer types of a network."""

    BISEL = "bisel"
    DENSE_LUI = "dense_lui"


class LastActivation(str, Enum):
    """Activation of the last layer."""

    TANH = "tanh"
    SOFTMAX = "softmax"


####################################################################################################
# Morphology
####################################################################################################

WORD_BITS = 64


class PointwiseOp(str, Enum):
    """Set operations between aligned binary images."""

    UNION = "union"
    INTERSECTION = "intersection"
    COMPLEMENT = "complement"


####################################################################################################
# Training
####################################################################################################


class LossKind(str, Enum):
    """Data losses."""

    MSE = "mse"
    BCE = "bce"
    CE_SOFTMAX = "ce_softmax"


class ScheduleAction(str, Enum):
    """Learning rate schedule decisions."""

    KEEP = "keep"
    HALVE = "halve"
    STOP = "stop"


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_MAX_ITERATIONS = 6000
DEFAULT_HALVE_WINDOW = 700
DEFAULT_STOP_WINDOW = 2100
LOSS_SMOOTHING_WINDOW = 100
DEFAULT_EPS_BIAS = 1e-3

####################################################################################################
# Regularization
####################################################################################################


class ReguVariant(str, Enum):
    """Morphological regularization losses."""

    NONE = "none"
    ACTI = "acti"
    EXACT = "exact"
    UNIF = "unif"
    NORMAL = "normal"


UNIF_THRESHOLD_RATIO = 2.0 / 3.0
NORMAL_THRESHOLD_RATIO = 3.0 / 4.0

####################################################################################################
# QP solver
####################################################################################################


class QpStatus(str, Enum):
    """Solver outcome."""

    SOLVED = "solved"
    SOLVED_POLISHED = "solved_polished"
    MAX_ITER_REACHED = "max_iter_reached"


QP_RHO = 0.1
QP_SIGMA = 1e-6
QP_ALPHA = 1.6
QP_TOL = 1e-8
QP_MAX_ITER = 20000
QP_RHO_UPDATE_EVERY = 25
QP_RHO_RATIO = 10.0
QP_RHO_MIN = 1e-6
QP_RHO_MAX = 1e6
QP_ACTIVE_MARGIN = 10.0  # rows within this many residuals of their bound join the working set guess

####################################################################################################
# Binarization
####################################################################################################


class Operation(str, Enum):
    """Binary morphological operations realized by a neuron."""

    DILATION = "dilation"
    EROSION = "erosion"


class Provenance(str, Enum):
    """How a neuron was binarized."""

    EXACT = "exact"
    PROJ_ACTIVABLE = "proj_activable"
    PROJ_CONSTANT = "proj_constant"


class Strategy(str, Enum):
    """Approximate binarization strategy."""

    AUTO = "auto"
    FORCE_CONSTANT = "force_constant"


ACTIVABLE_CAP = 64  # largest kernel (in cells) for which the activable projection is attempted
TIE_TOLERANCE = 1e-12
PIPELINE_FORMAT = "bimonn-pipeline"
PIPELINE_VERSION = 1

####################################################################################################
# Data
####################################################################################################


class Task(str, Enum):
    """Datasets a run can train on."""

    STICKS = "sticks"
    TOY = "toy"
    MNIST = "mnist"


MODEL_FORMAT = "bimonn-model"
MODEL_VERSION = 1
MANIFEST_FORMAT = "bimonn-dataset"
MANIFEST_VERSION = 1

IDX_DTYPES = {
    0x08: ">u1",
    0x09: ">i1",
    0x0B: ">i2",
    0x0C: ">i4",
    0x0D: ">f4",
    0x0E: ">f8",
}

MNIST_THRESHOLD = 128
STICK_ANGLES = (0, 90, -45)
EXPERT_LINE_LENGTH = 5

####################################################################################################
# Misc
####################################################################################################

STATUS_OK = 0
STATUS_ERR = 1

LOG_FILE_SIZE = 1024 * 1024 * 1  # 1 MB
LOG_FILE_COUNT = 3