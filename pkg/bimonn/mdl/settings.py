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

"""Settings module for bimonn.

Settings are loaded from a YAML file passed to the command line, then overridden by ``--set``
flags. Every model rejects unknown keys.
"""

from typing import Optional

from bimonn import constants
from bimonn.constants import (
    BiasMode,
    LastActivation,
    LayerKind,
    LossKind,
    Operation,
    ReguVariant,
    Strategy,
    Task,
    WeightMode,
)
from pydantic import BaseModel, Extra, root_validator, validator


class StrictModel(BaseModel):
    """Base of all settings, unknown keys are an error."""

    class Config:
        extra = Extra.forbid


class InitConfig(StrictModel):
    """Settings related to parameter initialization."""

    h: float = constants.SATURATION_LEVEL
    """Output level the smooth threshold reaches one standard deviation away from the bias"""
    eps_bias: float = constants.DEFAULT_EPS_BIAS
    """Half width of the uniform noise added to every initial bias"""
    input_mean: Optional[float] = None
    """Mean input pixel value, estimated from the first batch when not set"""

    @validator("h")
    def h_is_valid(cls, v):
        """Validate saturation level."""
        if not 0.5 < v < 1.0:
            raise ValueError("h must lie in (0.5, 1)")
        return v

    @validator("eps_bias")
    def eps_bias_is_valid(cls, v):
        """Validate bias noise."""
        if not 0.0 <= v <= 1e-2:
            raise ValueError("eps_bias must lie in [0, 1e-2]")
        return v

    @validator("input_mean")
    def input_mean_is_valid(cls, v):
        """Validate input mean."""
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("input_mean must lie in [0, 1]")
        return v


class TrainConfig(StrictModel):
    """Settings related to the optimization loop."""

    learning_rate: float = 0.01
    """Initial Adam learning rate"""
    batch_size: int = 16
    """Samples per optimizer step"""
    max_iterations: int = constants.DEFAULT_MAX_ITERATIONS
    """Largest number of optimizer steps, one step per batch"""
    epochs: Optional[int] = None
    """When set, also stop after this many passes over the training set"""
    halve_window: int = constants.DEFAULT_HALVE_WINDOW
    """Iterations without improvement of the smoothed loss before the learning rate is halved"""
    stop_window: int = constants.DEFAULT_STOP_WINDOW
    """Iterations without improvement of the smoothed loss before training stops"""
    smoothing_window: int = constants.LOSS_SMOOTHING_WINDOW
    """Number of recent losses averaged before comparing with the best loss"""
    loss: LossKind = LossKind.MSE
    """Data loss"""
    seed: int = 0
    """Seed of initialization and batch order"""

    @validator("learning_rate")
    def learning_rate_is_valid(cls, v):
        """Validate learning rate."""
        if v <= 0:
            raise ValueError("learning_rate must be positive")
        return v

    @validator("batch_size", "halve_window", "stop_window", "smoothing_window")
    def is_positive(cls, v):
        """Validate counts that must be positive."""
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @validator("max_iterations")
    def max_iterations_is_valid(cls, v):
        """Validate iteration budget."""
        if v < 0:
            raise ValueError("max_iterations must not be negative")
        return v

    @root_validator(skip_on_failure=True)
    def windows_are_ordered(cls, values):
        """Validate that training stops no earlier than the first halving."""
        if values["stop_window"] < values["halve_window"]:
            raise ValueError("stop_window must be at least halve_window")
        return values


class ReguConfig(StrictModel):
    """Settings related to morphological regularization."""

    variant: ReguVariant = ReguVariant.NONE
    """Regularization loss"""
    c: float = 0.0
    """Coefficient of the regularization loss"""
    delay_batches: int = 0
    """Batches to wait before the regularization is applied"""
    delta: float = 0.5
    """Input margin the activable projection of the acti variant assumes"""
    activable_cap: int = constants.ACTIVABLE_CAP
    """Largest kernel, in cells, the acti variant projects; larger kernels use the exact variant"""

    @validator("c")
    def c_is_valid(cls, v):
        """Validate coefficient."""
        if v < 0:
            raise ValueError("c must not be negative")
        return v

    @validator("delay_batches")
    def delay_is_valid(cls, v):
        """Validate delay."""
        if v < 0:
            raise ValueError("delay_batches must not be negative")
        return v

    @validator("delta")
    def delta_is_valid(cls, v):
        """Validate margin."""
        if not 0.0 < v <= 0.5:
            raise ValueError("delta must lie in (0, 0.5]")
        return v


class SticksConfig(StrictModel):
    """Settings of the noisy sticks dataset."""

    size: int = 70
    """Height and width of every image"""
    min_segments: int = 3
    """Fewest segments per image"""
    max_segments: int = 6
    """Most segments per image"""
    width: int = 2
    """Segment thickness in pixels"""
    min_length: int = 7
    """Shortest segment length"""
    max_length: int = 12
    """Longest segment length"""
    angles: list[int] = list(constants.STICK_ANGLES)
    """Segment orientations in degrees"""
    noise_rate: float = 0.08
    """Probability that a background pixel is flipped to foreground"""
    pepper_rate: Optional[float] = None
    """Probability that a segment pixel is flipped to background, ``noise_rate`` when unset"""
    seed: int = 0
    """Seed of the generator"""

    @validator("max_segments")
    def segments_are_ordered(cls, v, values):
        """Validate segment count range."""
        if "min_segments" in values and not 1 <= values["min_segments"] <= v:
            raise ValueError("need 1 <= min_segments <= max_segments")
        return v

    @validator("min_length")
    def min_length_is_valid(cls, v):
        """Validate that the expert line elements cannot erase a segment."""
        if v <= constants.EXPERT_LINE_LENGTH:
            raise ValueError(f"min_length must exceed {constants.EXPERT_LINE_LENGTH}")
        return v

    @validator("max_length")
    def lengths_are_ordered(cls, v, values):
        """Validate segment length range."""
        if "min_length" in values and v < values["min_length"]:
            raise ValueError("max_length must be at least min_length")
        return v

    @validator("angles")
    def angles_are_valid(cls, v):
        """Validate orientations."""
        if not v or any(angle not in (0, 90, -45, 45) for angle in v):
            raise ValueError("angles must be a nonempty subset of {0, 90, -45, 45}")
        return v

    @validator("noise_rate")
    def noise_rate_is_valid(cls, v):
        """Validate noise rate."""
        if not 0.0 < v < 1.0:
            raise ValueError("noise_rate must lie in (0, 1)")
        return v

    @validator("pepper_rate")
    def pepper_rate_is_valid(cls, v):
        """Validate foreground noise rate."""
        if v is not None and not 0.0 <= v < 1.0:
            raise ValueError("pepper_rate must lie in [0, 1)")
        return v


class ToyConfig(StrictModel):
    """Settings of the structuring element recovery dataset."""

    size: int = 32
    """Height and width of every image"""
    density: float = 0.1
    """Probability of a foreground input pixel"""
    se_shape: list[int] = [3, 3]
    """Kernel extents of the target structuring element"""
    se_bits: list[int] = [0, 1, 0, 1, 1, 1, 0, 1, 0]
    """Row-major membership bits of the target structuring element"""
    operation: Operation = Operation.DILATION
    """Operation producing the targets"""
    seed: int = 0
    """Seed of the generator"""

    @validator("density")
    def density_is_valid(cls, v):
        """Validate density."""
        if not 0.0 < v < 1.0:
            raise ValueError("density must lie in (0, 1)")
        return v

    @validator("se_bits")
    def se_bits_fit(cls, v, values):
        """Validate that the bits fill the kernel and select a cell."""
        shape = values.get("se_shape")
        if shape is not None and (len(shape) != 2 or len(v) != shape[0] * shape[1]):
            raise ValueError("se_bits must hold one bit per kernel cell")
        if not any(v):
            raise ValueError("se_bits must select at least one cell")
        return v


class LevelSetConfig(StrictModel):
    """Upper level sets an input channel is split into."""

    thresholds: list[float]
    """Strictly increasing thresholds"""

    @validator("thresholds")
    def thresholds_are_valid(cls, v):
        """Validate thresholds."""
        if not v:
            raise ValueError("thresholds must not be empty")
        if any(low >= high for low, high in zip(v, v[1:])):
            raise ValueError("thresholds must be strictly increasing")
        return v


class LayerSpec(StrictModel):
    """One layer of a network."""

    kind: LayerKind
    """Layer type"""
    in_channels: int
    """Input channels, or input length of a dense layer"""
    out_channels: int
    """Output channels, or output length of a dense layer"""
    kernel_size: int = 1
    """Side of the square spatial kernel of a BiSEL layer"""

    @validator("in_channels", "out_channels")
    def is_positive(cls, v):
        """Validate channel counts."""
        if v < 1:
            raise ValueError("channel counts must be at least 1")
        return v

    @validator("kernel_size")
    def kernel_is_odd(cls, v):
        """Validate kernel size."""
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel_size must be a positive odd number")
        return v


class ArchitectureConfig(StrictModel):
    """Network architecture and reparametrizations."""

    layers: list[LayerSpec]
    """Layers in evaluation order"""
    weight_mode: WeightMode = WeightMode.POSITIVE
    """Weight reparametrization of every neuron"""
    bias_mode: BiasMode = BiasMode.POSITIVE
    """Bias reparametrization of every neuron"""
    last_activation: LastActivation = LastActivation.TANH
    """Activation of the last layer"""

    @validator("layers")
    def layers_chain(cls, v):
        """Validate that channel counts chain from layer to layer."""
        if not v:
            raise ValueError("at least one layer is required")
        for previous, layer in zip(v, v[1:]):
            if previous.kind == LayerKind.DENSE_LUI and layer.kind == LayerKind.BISEL:
                raise ValueError("a BiSEL layer cannot follow a dense layer")
            if previous.kind == layer.kind and previous.out_channels != layer.in_channels:
                raise ValueError(
                    f"layer with {layer.in_channels} inputs follows one with "
                    f"{previous.out_channels} outputs"
                )
        return v


class BinarizeConfig(StrictModel):
    """Settings related to network binarization."""

    strategy: Strategy = Strategy.AUTO
    """Approximate projection used for neurons that are not activated"""
    skip_last: bool = False
    """Keep the last layer real valued, for classifier heads"""
    activable_cap: int = constants.ACTIVABLE_CAP
    """Largest kernel, in cells, projected onto activable parameters"""


class DataConfig(StrictModel):
    """Dataset settings."""

    task: Task = Task.STICKS
    """Dataset to generate or load"""
    sticks: SticksConfig = SticksConfig()
    """Noisy sticks generator"""
    toy: ToyConfig = ToyConfig()
    """Structuring element recovery generator"""
    n_train: int = 1000
    """Generated training pairs"""
    n_val: int = 100
    """Generated validation pairs"""
    dataset_dir: Optional[str] = None
    """Directory of a generated dataset, train and eval read from it"""
    mnist_dir: Optional[str] = None
    """Directory holding the four MNIST IDX files"""
    mnist_limit: Optional[int] = None
    """Use only the first samples of every MNIST split"""
    level_sets: Optional[LevelSetConfig] = None
    """Split gray inputs into upper level sets instead of thresholding at 128"""

    @validator("n_train", "n_val")
    def is_positive(cls, v):
        """Validate sample counts."""
        if v < 1:
            raise ValueError("sample counts must be at least 1")
        return v


class RunConfig(StrictModel):
    """Single class containing all settings of a command."""

    seed: int = 0
    """Seed used when a section does not set its own"""
    preset: Optional[str] = None
    """Name of the hyperparameter preset the file was built on"""
    data: DataConfig = DataConfig()
    """Dataset settings"""
    architecture: ArchitectureConfig = ArchitectureConfig(
        layers=[
            LayerSpec(kind=LayerKind.BISEL, in_channels=1, out_channels=3, kernel_size=5),
            LayerSpec(kind=LayerKind.BISEL, in_channels=3, out_channels=1, kernel_size=5),
        ],
        weight_mode=WeightMode.DUAL,
        bias_mode=BiasMode.POSITIVE,
    )
    """Network"""
    init: InitConfig = InitConfig()
    """Initialization settings"""
    train: TrainConfig = TrainConfig()
    """Training settings"""
    regu: ReguConfig = ReguConfig()
    """Regularization settings"""
    binarize: BinarizeConfig = BinarizeConfig()
    """Binarization settings"""

    @root_validator(skip_on_failure=True)
    def regularization_needs_positive_weights(cls, values):
        """Validate that morphological regularization only runs on positive weights."""
        regu, architecture = values["regu"], values["architecture"]
        if regu.variant != ReguVariant.NONE and architecture.weight_mode == WeightMode.IDENTITY:
            raise ValueError("morphological regularization requires positive or dual weights")
        return values
