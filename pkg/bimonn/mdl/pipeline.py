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

"""Documents describing a binarized network and how it was obtained."""

from typing import Optional

import numpy as np
from bimonn import constants
from bimonn.constants import LastActivation, LayerKind, Operation, Provenance
from bimonn.mdl.settings import LayerSpec
from bimonn.morphology import StructuringElement
from pydantic import BaseModel, root_validator, validator


class BinarizedNeuron(BaseModel):
    """A neuron replaced by a binary morphological operation."""

    operation: Operation
    """Dilation or erosion"""
    se_shape: list[int]
    """Extents of the structuring element window, (rows, cols) or (channels,) for a LUI"""
    se_bits: list[int]
    """Structuring element membership, row-major over the window"""
    complement: bool = False
    """Complement the result, set when the scaling was negative"""
    provenance: Provenance
    """Exact binarization or the projection that produced it"""
    distance: float = 0.0
    """Distance between the float parameters and their projection"""
    delta_out: Optional[float] = None
    """Output margin guaranteed by an exact neuron"""

    @validator("se_shape")
    def se_shape_is_valid(cls, v):
        """Validate the window extents."""
        if len(v) not in (1, 2) or any(extent < 1 for extent in v):
            raise ValueError(f"Invalid structuring element window {v}")
        return v

    @validator("se_bits")
    def se_is_valid(cls, v, values):
        """Validate the bitmask."""
        shape = values.get("se_shape")
        if shape is not None and len(v) != int(np.prod(shape)):
            raise ValueError(f"{len(v)} bits for a {shape} window")
        if any(bit not in (0, 1) for bit in v):
            raise ValueError("Structuring element bits must be 0 or 1")
        if not any(v):
            raise ValueError("Structuring element must be nonempty")
        return v

    @root_validator(skip_on_failure=True)
    def exact_has_margin(cls, values):
        """Exact neurons carry a zero distance and an output margin."""
        if values["provenance"] == Provenance.EXACT:
            if values["distance"] != 0.0 or values["delta_out"] is None:
                raise ValueError("Exact neurons need distance 0 and an output margin")
        return values

    @classmethod
    def from_mask(
        cls,
        operation: Operation,
        mask: np.ndarray,
        provenance: Provenance,
        complement: bool = False,
        distance: float = 0.0,
        delta_out: Optional[float] = None,
    ) -> "BinarizedNeuron":
        """Build a neuron from a membership mask over its window."""
        mask = np.asarray(mask, dtype=bool)
        return cls(
            operation=operation,
            se_shape=list(mask.shape),
            se_bits=[int(bit) for bit in mask.reshape(-1)],
            complement=complement,
            provenance=provenance,
            distance=distance,
            delta_out=delta_out,
        )

    def mask(self) -> np.ndarray:
        """Membership mask in the window shape."""
        return np.asarray(self.se_bits, dtype=bool).reshape(self.se_shape)

    def selected(self) -> list[int]:
        """Flat indices of the member cells."""
        return [index for index, bit in enumerate(self.se_bits) if bit]

    def structuring_element(self) -> StructuringElement:
        """Structuring element of a spatial neuron."""
        return StructuringElement(self.mask())


class PipelineLayer(BaseModel):
    """Binarized BiSEL or dense layer."""

    kind: LayerKind
    """Layer type"""
    in_channels: int
    """Number of input channels or values"""
    out_channels: int
    """Number of output channels or values"""
    bises: Optional[list[list[BinarizedNeuron]]] = None
    """Spatial neurons indexed [input][output], absent for dense layers"""
    luis: list[BinarizedNeuron]
    """Channel combining neurons, one per output"""

    @root_validator(skip_on_failure=True)
    def grid_matches_channels(cls, values):
        """Neuron counts match the channel counts."""
        n_in, n_out = values["in_channels"], values["out_channels"]
        if len(values["luis"]) != n_out:
            raise ValueError(f"{len(values['luis'])} LUI neurons for {n_out} outputs")
        bises = values["bises"]
        if values["kind"] == LayerKind.BISEL:
            if bises is None or len(bises) != n_in or any(len(row) != n_out for row in bises):
                raise ValueError(f"BiSE grid does not match {n_in}x{n_out} channels")
        elif bises is not None:
            raise ValueError("Dense layers have no spatial neurons")
        return values


class FloatGroup(BaseModel):
    """Effective parameters of a group of neurons kept in floating point."""

    lead_shape: list[int]
    """Neuron grid shape"""
    weights: list[float]
    """Effective weights, row-major over (neurons..., cells)"""
    bias: list[float]
    """Effective biases, row-major over the neuron grid"""
    p: list[float]
    """Scalings, row-major over the neuron grid"""


class FloatLayer(BaseModel):
    """Last layer left in floating point, fed with {0, 1} values."""

    spec: LayerSpec
    """Layer geometry"""
    last_activation: LastActivation
    """Activation of the head"""
    groups: dict[str, FloatGroup]
    """Effective parameters per neuron group"""


class BinaryPipeline(BaseModel):
    """Chain of binary morphological layers, optionally ending in a float head."""

    format: str = constants.PIPELINE_FORMAT
    """Document type tag"""
    version: int = constants.PIPELINE_VERSION
    """Document version"""
    layers: list[PipelineLayer]
    """Binary layers in evaluation order"""
    float_head: Optional[FloatLayer] = None
    """Float last layer, set for classifier heads kept unbinarized"""
    warnings: list[str] = []
    """Fallbacks taken while binarizing"""

    @validator("format")
    def format_is_known(cls, v):
        """Validate the document tag."""
        if v != constants.PIPELINE_FORMAT:
            raise ValueError(f"Not a pipeline document: {v}")
        return v

    @validator("version")
    def version_is_known(cls, v):
        """Validate the document version."""
        if v != constants.PIPELINE_VERSION:
            raise ValueError(f"Unsupported pipeline version {v}")
        return v

    @root_validator(skip_on_failure=True)
    def channels_chain(cls, values):
        """Every layer consumes what the previous one produces."""
        layers = values["layers"]
        for previous, layer in zip(layers, layers[1:]):
            if layer.kind == LayerKind.BISEL and previous.kind == LayerKind.DENSE_LUI:
                raise ValueError("A BiSEL layer cannot follow a dense layer")
            if layer.kind == previous.kind and layer.in_channels != previous.out_channels:
                raise ValueError(
                    f"Layer with {layer.in_channels} inputs after {previous.out_channels} outputs"
                )
        head = values["float_head"]
        if head is not None and layers:
            last = layers[-1]
            if head.spec.kind == last.kind and head.spec.in_channels != last.out_channels:
                raise ValueError("Float head does not match the last binary layer")
        if not layers and head is None:
            raise ValueError("Pipeline has no layers")
        return values

    @property
    def last_layer_float(self) -> bool:
        """Whether the pipeline ends with a float head."""
        return self.float_head is not None

    @property
    def input_channels(self) -> int:
        """Channels (or values) the pipeline expects."""
        if self.layers:
            return self.layers[0].in_channels
        return self.float_head.spec.in_channels


class NeuronActivation(BaseModel):
    """Activation status of one neuron."""

    layer: int
    """Layer index"""
    group: str
    """bise or lui"""
    index: list[int]
    """Position in the neuron grid"""
    activated: bool
    """Whether the linear check succeeded"""
    operation: Optional[Operation] = None
    """Operation found by the check"""
    delta: float
    """Input margin the check used"""


class ActivationReport(BaseModel):
    """Share of neurons whose float parameters realize a morphological operation."""

    margin: str
    """Margin policy, chain or fixed"""
    ratio: float
    """Activated share over all neurons"""
    bise_ratio: Optional[float] = None
    """Activated share over spatial neurons"""
    lui_ratio: Optional[float] = None
    """Activated share over LUI neurons"""
    neurons: list[NeuronActivation] = []
    """Per neuron details"""
