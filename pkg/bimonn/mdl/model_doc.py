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

"""Persisted form of a trained model."""

from typing import Optional

from bimonn import constants
from bimonn.mdl.settings import ArchitectureConfig, InitConfig
from pydantic import BaseModel, validator


class ParamArray(BaseModel):
    """A raw parameter array."""

    shape: list[int]
    """Array extents"""
    values: list[float]
    """Row-major values"""

    @validator("values")
    def values_fit(cls, v, values):
        """Validate the value count."""
        shape = values.get("shape")
        count = 1
        for extent in shape or []:
            count *= extent
        if shape is not None and len(v) != count:
            raise ValueError(f"{len(v)} values for shape {shape}")
        return v


class TrainingDigest(BaseModel):
    """Summary of the run that produced the parameters."""

    iterations: int = 0
    """Optimizer steps performed"""
    final_learning_rate: Optional[float] = None
    """Learning rate when training stopped"""
    stop_reason: Optional[str] = None
    """Why training stopped"""
    params_sha256: str = ""
    """Checksum of the raw parameters"""


class ModelDocument(BaseModel):
    """Architecture, reparametrizations and raw parameters of a model."""

    format: str = constants.MODEL_FORMAT
    """Document type tag"""
    version: int = constants.MODEL_VERSION
    """Document version"""
    architecture: ArchitectureConfig
    """Layers, reparametrization modes and last activation"""
    init: InitConfig = InitConfig()
    """Initialization the parameters started from"""
    dual_scale: float = constants.DUAL_SCALE
    """Sum of effective weights in dual mode"""
    params: dict[str, ParamArray]
    """Raw parameters keyed like the model's parameter names"""
    training: TrainingDigest = TrainingDigest()
    """Training state digest"""

    @validator("format")
    def format_is_known(cls, v):
        """Validate the document tag."""
        if v != constants.MODEL_FORMAT:
            raise ValueError(f"Not a model document: {v}")
        return v

    @validator("version")
    def version_is_known(cls, v):
        """Validate the document version."""
        if v != constants.MODEL_VERSION:
            raise ValueError(f"Unsupported model version {v}")
        return v
