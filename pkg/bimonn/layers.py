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

"""Differentiable morphological layers.

A BiSE neuron computes ``xi(p * (x conv W - b))`` with the smooth threshold
``xi(u) = tanh(u) / 2 + 1 / 2``, where the effective weights ``W`` and bias ``b`` are obtained from
raw learnable parameters through a reparametrization. A LUI neuron is a BiSE whose kernel spans
the channels of a single pixel. A BiSEL layer applies one BiSE per (input, output) channel pair
and merges every output channel's column with a LUI. A dense layer is a BiSEL layer without the
spatial stage applied to an input of 1x1 images.

All layer math works on arrays of neurons: the kernel is always the last axis of a weight
tensor, the leading axes index the neurons.
"""

import logging
from typing import Iterator, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from bimonn import autodiff as ad
from bimonn import constants
from bimonn.autodiff import Tensor
from bimonn.constants import BiasMode, LastActivation, LayerKind, WeightMode
from bimonn.mdl.settings import ArchitectureConfig, LevelSetConfig, LayerSpec
from pydantic import BaseModel, validator


class LayerError(Exception):
    """Exception raised for errors in morphological layers."""

    def __init__(self, message: str):
        """Initialize LayerError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class ReparametrizationError(LayerError):
    """Exception raised when raw parameters cannot be mapped to effective ones."""

    pass


class ChannelMismatchError(LayerError):
    """Exception raised when an input does not have the channels a layer expects."""

    pass


####################################################################################################
# Scalar maps
####################################################################################################


def xi(u: Union[np.ndarray, float]) -> Union[np.ndarray, float]:
    """Smooth threshold ``tanh(u) / 2 + 1 / 2``."""
    return 0.5 * np.tanh(u) + 0.5


def xi_inverse(y: Union[np.ndarray, float]) -> Union[np.ndarray, float]:
    """Inverse of the smooth threshold on (0, 1)."""
    return np.arctanh(2.0 * np.asarray(y, dtype=np.float64) - 1.0)


def softplus(x: Union[np.ndarray, float]) -> Union[np.ndarray, float]:
    """``log(1 + exp(x))`` without overflow."""
    return np.logaddexp(0.0, x)


def softplus_inverse(y: Union[np.ndarray, float]) -> Union[np.ndarray, float]:
    """``log(exp(y) - 1)``, arguments are clamped to at least 1e-10."""
    y = np.maximum(np.asarray(y, dtype=np.float64), constants.SOFTPLUS_INVERSE_FLOOR)
    return y + np.log(-np.expm1(-y))


####################################################################################################
# Parameters and images
####################################################################################################


class BiseParams(BaseModel):
    """Raw learnable parameters of one neuron and how they map to effective ones."""

    omega: np.ndarray
    """Raw weights over the kernel, spatial (kh, kw) or tubular (N,)"""
    beta: float
    """Raw bias"""
    p: float = 1.0
    """Scaling, a negative value complements the output"""
    weight_mode: WeightMode = WeightMode.IDENTITY
    """Weight reparametrization"""
    bias_mode: BiasMode = BiasMode.IDENTITY
    """Bias reparametrization"""
    dual_scale: float = constants.DUAL_SCALE
    """Sum of the effective weights in dual mode"""

    class Config:
        arbitrary_types_allowed = True

    @validator("omega", pre=True)
    def omega_is_valid(cls, v):
        """Validate kernel extents."""
        v = np.array(v, dtype=np.float64)
        if v.ndim not in (1, 2) or v.size == 0:
            raise ValueError("omega must be a nonempty 1D or 2D array")
        if v.ndim == 2 and (v.shape[0] % 2 == 0 or v.shape[1] % 2 == 0):
            raise ValueError("spatial kernel extents must be odd")
        return v


class AlmostBinaryImage:
    """Real image in [0, 1] whose values avoid the band (1/2 - delta, 1/2 + delta)."""

    def __init__(self, values: np.ndarray, delta: float):
        """Initialize AlmostBinaryImage class.

        Parameters
        ----------
        values : np.ndarray
            Pixel values
        delta : float
            Margin, in (0, 1/2]

        Raises
        ------
        LayerError
            If a value lies outside [0, 1] or inside the forbidden band
        """
        values = np.asarray(values, dtype=np.float64)
        if not 0.0 < delta <= 0.5:
            raise LayerError(f"Margin must lie in (0, 0.5], got {delta}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise LayerError("Almost binary values must lie in [0, 1]")
        if np.any((values > 0.5 - delta) & (values < 0.5 + delta)):
            raise LayerError(f"Values inside the band of margin {delta}")
        self.values = values
        self.delta = delta

    @classmethod
    def random(
        cls, binary: np.ndarray, delta: float, rng: np.random.Generator
    ) -> "AlmostBinaryImage":
        """Draw an almost binary image whose associated binary image is ``binary``."""
        binary = np.asarray(binary, dtype=bool)
        high = rng.uniform(0.5 + delta, 1.0, size=binary.shape)
        low = rng.uniform(0.0, 0.5 - delta, size=binary.shape)
        return cls(np.where(binary, high, low), delta)

    def associated(self) -> np.ndarray:
        """Binary image of the values above 1/2."""
        return self.values > 0.5


class BiasRange(NamedTuple):
    """Interval the projected bias reparametrizations keep the bias in."""

    lower: np.ndarray
    upper: np.ndarray


def _smallest_indices(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the smallest weight and of the smallest weight strictly above it."""
    first = np.argmin(weights, axis=-1)
    smallest = np.take_along_axis(weights, first[..., None], -1)
    above = np.where(weights > smallest, weights, np.inf)
    second = np.argmin(above, axis=-1)
    second = np.where(np.isfinite(above.min(axis=-1)), second, first)
    return first, second


def bias_range(weights: np.ndarray) -> BiasRange:
    """Bias interval for effective weights, kernel on the last axis.

    ``lower = (W1 + W2) / 2`` and ``upper = sum(W) - W1 / 2`` with ``W1 < W2`` the two smallest
    distinct values (``W2 = W1`` when all values are equal). A single cell kernel, where the lower
    end would exceed the upper end, collapses both ends to their midpoint.
    """
    weights = np.asarray(weights, dtype=np.float64)
    first, second = _smallest_indices(weights)
    w1 = np.take_along_axis(weights, first[..., None], -1)[..., 0]
    w2 = np.take_along_axis(weights, second[..., None], -1)[..., 0]
    lower = (w1 + w2) / 2.0
    upper = weights.sum(axis=-1) - w1 / 2.0
    middle = (lower + upper) / 2.0
    crossed = lower > upper
    return BiasRange(np.where(crossed, middle, lower), np.where(crossed, middle, upper))


####################################################################################################
# Reparametrizations
####################################################################################################


def effective_weights(
    omega: ad.ArrayLike, mode: WeightMode, dual_scale: float = constants.DUAL_SCALE
) -> Tensor:
    """Effective weights of raw weights, kernel on the last axis.

    Raises
    ------
    ReparametrizationError
        If the dual normalization sum underflows to zero
    """
    omega = ad.as_tensor(omega)
    if mode == WeightMode.IDENTITY:
        return omega
    positive = ad.softplus(omega)
    if mode == WeightMode.POSITIVE:
        return positive
    total = ad.reduce_sum(positive, axis=-1)
    if np.any(total.value <= 0.0):
        raise ReparametrizationError("Dual reparametrization sum underflowed to zero")
    return dual_scale * positive / ad.reshape(total, total.shape + (1,))


def effective_bias(beta: ad.ArrayLike, weights: Tensor, mode: BiasMode) -> Tensor:
    """Effective bias inside the forward pass, one bias per neuron of ``weights``."""
    beta = ad.as_tensor(beta)
    if mode == BiasMode.IDENTITY:
        return beta
    bias = ad.softplus(beta)
    if mode != BiasMode.PROJECTED_REPARAM:
        return bias
    first, second = _smallest_indices(weights.value)
    lead = weights.shape[:-1]
    w1 = ad.reshape(ad.gather(weights, first[..., None]), lead)
    w2 = ad.reshape(ad.gather(weights, second[..., None]), lead)
    lower = (w1 + w2) * 0.5
    upper = ad.reduce_sum(weights, axis=-1) - w1 * 0.5
    crossed = lower.value > upper.value
    middle = (lower + upper) * 0.5
    lower = ad.where(crossed, middle, lower)
    upper = ad.where(crossed, middle, upper)
    clamped_high = ad.where(bias.value > upper.value, upper, bias)
    return ad.where(bias.value < lower.value, lower, clamped_high)


def project_raw_bias(beta: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Raw bias whose softplus is the projection of the current one onto the bias range."""
    limits = bias_range(weights)
    projected = np.clip(softplus(beta), limits.lower, limits.upper)
    return softplus_inverse(projected)


def reparam_weights(params: BiseParams) -> np.ndarray:
    """Effective weights of one neuron, in the kernel's shape."""
    shape = params.omega.shape
    flat = params.omega.reshape(-1)
    return effective_weights(flat, params.weight_mode, params.dual_scale).value.reshape(shape)


def reparam_bias(
    params: BiseParams, weights: np.ndarray, phase: str = "in_forward"
) -> tuple[float, float]:
    """Effective bias of one neuron.

    Parameters
    ----------
    params : BiseParams
        Neuron parameters
    weights : np.ndarray
        Effective weights of the neuron
    phase : str, optional
        "in_forward" evaluates the bias as the forward pass does, "post_step" also applies the
        projection of the projected mode to the raw bias, by default "in_forward"

    Returns
    -------
    tuple[float, float]
        Effective bias and the (possibly updated) raw bias
    """
    if phase not in ("in_forward", "post_step"):
        raise LayerError(f"Unknown bias phase {phase}")
    flat = np.asarray(weights, dtype=np.float64).reshape(-1)
    beta = params.beta
    if phase == "post_step" and params.bias_mode == BiasMode.PROJECTED:
        beta = float(project_raw_bias(np.asarray(beta), flat))
    bias = effective_bias(np.asarray(beta), ad.as_tensor(flat), params.bias_mode)
    return float(bias.value), beta


def invert_weights(weights: np.ndarray, mode: WeightMode) -> np.ndarray:
    """Raw weights producing the given effective weights.

    In dual mode the result reproduces ``weights`` only when they already sum to the dual scale.
    """
    if mode == WeightMode.IDENTITY:
        return np.array(weights, dtype=np.float64)
    return softplus_inverse(weights)


def invert_bias(bias: Union[np.ndarray, float], mode: BiasMode) -> np.ndarray:
    """Raw bias producing the given effective bias."""
    if mode == BiasMode.IDENTITY:
        return np.array(bias, dtype=np.float64)
    return softplus_inverse(bias)


####################################################################################################
# Forward stages
####################################################################################################


def bise_stage(
    x: Tensor, weights: Tensor, bias: Tensor, p: Tensor, activate: bool = True
) -> Tensor:
    """Spatial BiSE stage.

    Parameters
    ----------
    x : Tensor
        Input (batch, N, height, width)
    weights : Tensor
        Effective kernels (N, K, kh, kw)
    bias : Tensor
        Effective biases (N, K)
    p : Tensor
        Scalings (N, K)
    activate : bool, optional
        Apply the smooth threshold, by default True

    Returns
    -------
    Tensor
        Output (batch, N, K, height, width)
    """
    n_in, n_out = weights.shape[:2]
    shifted = ad.conv2d(x, weights) - ad.reshape(bias, (1, n_in, n_out, 1, 1))
    scaled = ad.reshape(p, (1, n_in, n_out, 1, 1)) * shifted
    return ad.xi(scaled) if activate else scaled


def lui_stage(
    y: Tensor, weights: Tensor, bias: Tensor, p: Tensor, activate: bool = True
) -> Tensor:
    """Channel merging LUI stage.

    ``y`` is either the (batch, N, K, height, width) output of a BiSE stage, where LUI ``k``
    reads column ``k``, or a (batch, N, height, width) input every LUI reads entirely.
    ``weights`` is (K, N), ``bias`` and ``p`` are (K,). Output is (batch, K, height, width).
    """
    n_out = weights.shape[0]
    if y.shape[1] != weights.shape[1]:
        raise ChannelMismatchError(
            f"LUI over {weights.shape[1]} channels got an input with {y.shape[1]}"
        )
    subscripts = "bnkhw,kn->bkhw" if y.ndim == 5 else "bnhw,kn->bkhw"
    shifted = ad.einsum(subscripts, y, weights) - ad.reshape(bias, (1, n_out, 1, 1))
    scaled = ad.reshape(p, (1, n_out, 1, 1)) * shifted
    return ad.xi(scaled) if activate else scaled


def _as_batch(x: Union[np.ndarray, AlmostBinaryImage], ndim: int) -> tuple[np.ndarray, bool]:
    values = x.values if isinstance(x, AlmostBinaryImage) else np.asarray(x, dtype=np.float64)
    if values.ndim == ndim - 1:
        return values[None], True
    if values.ndim != ndim:
        raise ChannelMismatchError(f"Expected a {ndim - 1}D or {ndim}D input, got {values.shape}")
    return values, False


def _check_finite(params: BiseParams) -> None:
    values = np.append(params.omega.reshape(-1), [params.beta, params.p])
    if not np.all(np.isfinite(values)):
        raise LayerError("Neuron has a non-finite parameter")


def _neuron_tensors(params: BiseParams) -> tuple[np.ndarray, float, float]:
    _check_finite(params)
    weights = reparam_weights(params)
    bias, _ = reparam_bias(params, weights)
    return weights, bias, params.p


def bise_forward(x: Union[np.ndarray, AlmostBinaryImage], params: BiseParams) -> np.ndarray:
    """Output of a single spatial BiSE on a (height, width) image or a batch of them."""
    if params.omega.ndim != 2:
        raise LayerError("A spatial BiSE needs a 2D kernel")
    values, single = _as_batch(x, 3)
    weights, bias, p = _neuron_tensors(params)
    out = bise_stage(
        Tensor(values[:, None]),
        Tensor(weights[None, None]),
        Tensor(np.full((1, 1), bias)),
        Tensor(np.full((1, 1), p)),
    ).value[:, 0, 0]
    return out[0] if single else out


def lui_forward(x: Union[np.ndarray, AlmostBinaryImage], params: BiseParams) -> np.ndarray:
    """Output channel of a LUI on an (N, height, width) stack or a batch of them."""
    if params.omega.ndim != 1:
        raise LayerError("A LUI needs a tubular kernel")
    values, single = _as_batch(x, 4)
    weights, bias, p = _neuron_tensors(params)
    out = lui_stage(
        Tensor(values), Tensor(weights[None]), Tensor([bias]), Tensor([p])
    ).value[:, 0]
    return out[0] if single else out


def bisel_forward(
    x: Union[np.ndarray, AlmostBinaryImage],
    bises: Optional[Sequence[Sequence[BiseParams]]],
    luis: Sequence[BiseParams],
) -> np.ndarray:
    """Output of a BiSEL layer given as neuron parameters.

    Parameters
    ----------
    x : Union[np.ndarray, AlmostBinaryImage]
        Input (N, height, width) or (batch, N, height, width)
    bises : Optional[Sequence[Sequence[BiseParams]]]
        N rows of K spatial neurons, or None to feed the input channels to the LUIs directly
    luis : Sequence[BiseParams]
        K neurons with tubular kernels over N channels

    Returns
    -------
    np.ndarray
        Output (K, height, width) or (batch, K, height, width)

    Raises
    ------
    ChannelMismatchError
        If the neuron grid does not match the input channels
    """
    values, single = _as_batch(x, 4)
    n_in, n_out = values.shape[1], len(luis)
    lui_parts = [_neuron_tensors(params) for params in luis]
    lui_weights = np.stack([part[0] for part in lui_parts])
    if lui_weights.shape != (n_out, n_in):
        raise ChannelMismatchError(f"LUI kernels {lui_weights.shape} for {n_in} input channels")
    stage_input = Tensor(values)
    if bises is not None:
        if len(bises) != n_in or any(len(row) != n_out for row in bises):
            raise ChannelMismatchError(f"BiSE grid does not match {n_in}x{n_out} channels")
        parts = [[_neuron_tensors(params) for params in row] for row in bises]
        stage_input = bise_stage(
            stage_input,
            Tensor(np.array([[part[0] for part in row] for row in parts])),
            Tensor(np.array([[part[1] for part in row] for row in parts])),
            Tensor(np.array([[part[2] for part in row] for row in parts])),
        )
    out = lui_stage(
        stage_input,
        Tensor(lui_weights),
        Tensor(np.array([part[1] for part in lui_parts])),
        Tensor(np.array([part[2] for part in lui_parts])),
    ).value
    return out[0] if single else out


def dense_lui_forward(x: np.ndarray, luis: Sequence[BiseParams]) -> np.ndarray:
    """Output of a dense layer on an (n,) vector or a (batch, n) matrix."""
    values = np.asarray(x, dtype=np.float64)
    single = values.ndim == 1
    batch = values.reshape(-1 if not single else 1, values.shape[-1], 1, 1)
    out = bisel_forward(batch, None, luis).reshape(batch.shape[0], len(luis))
    return out[0] if single else out


def level_set_decompose(image: np.ndarray, cfg: LevelSetConfig) -> np.ndarray:
    """Split every channel into its upper level sets.

    Parameters
    ----------
    image : np.ndarray
        Image (c, height, width) or batch (batch, c, height, width)
    cfg : LevelSetConfig
        Thresholds

    Returns
    -------
    np.ndarray
        Boolean image with c * len(thresholds) channels, channel ``c * T + t`` holding
        ``image[c] >= thresholds[t]``
    """
    if not cfg.thresholds:
        raise LayerError("Level set decomposition needs at least one threshold")
    image = np.asarray(image)
    thresholds = np.asarray(cfg.thresholds).reshape(-1, 1, 1)
    levels = image[..., :, None, :, :] >= thresholds
    shape = image.shape[:-3] + (image.shape[-3] * len(cfg.thresholds),) + image.shape[-2:]
    return levels.reshape(shape)


####################################################################################################
# Layers
####################################################################################################


class NeuronGroup(NamedTuple):
    """Neurons of a layer that share a kernel shape."""

    name: str
    lead_shape: tuple[int, ...]
    kernel_shape: tuple[int, ...]

    @property
    def n_cells(self) -> int:
        """Kernel size in cells."""
        return int(np.prod(self.kernel_shape))


class GroupTensors(NamedTuple):
    """Effective weights (neurons..., cells), biases and scalings (neurons...) of a group."""

    weights: Tensor
    bias: Tensor
    p: Tensor


class NeuronView(NamedTuple):
    """Effective parameters of a single neuron."""

    layer: int
    group: str
    index: tuple[int, ...]
    kernel_shape: tuple[int, ...]
    weights: np.ndarray
    bias: float
    p: float


class Layer:
    """Base of the layers, holding raw parameters per neuron group."""

    kind: LayerKind

    def __init__(
        self,
        spec: LayerSpec,
        weight_mode: WeightMode,
        bias_mode: BiasMode,
        dual_scale: float = constants.DUAL_SCALE,
    ):
        self.spec = spec
        self.weight_mode = weight_mode
        self.bias_mode = bias_mode
        self.dual_scale = dual_scale
        self.params: dict[str, np.ndarray] = {}
        for group in self.groups():
            cells = (group.n_cells,)
            self.params[f"{group.name}.omega"] = np.zeros(group.lead_shape + cells)
            self.params[f"{group.name}.beta"] = np.zeros(group.lead_shape)
            self.params[f"{group.name}.p"] = np.ones(group.lead_shape)

    def groups(self) -> list[NeuronGroup]:
        """Neuron groups of the layer in evaluation order."""
        raise NotImplementedError

    def effective(self, tensors: Mapping[str, Tensor]) -> dict[str, GroupTensors]:
        """Effective parameters from raw parameter tensors keyed like ``params``."""
        result = {}
        for group in self.groups():
            weights = effective_weights(
                tensors[f"{group.name}.omega"], self.weight_mode, self.dual_scale
            )
            bias = effective_bias(tensors[f"{group.name}.beta"], weights, self.bias_mode)
            result[group.name] = GroupTensors(weights, bias, tensors[f"{group.name}.p"])
        return result

    def forward(
        self, x: Tensor, effective: Mapping[str, GroupTensors], activate: bool = True
    ) -> Tensor:
        """Layer output, ``activate=False`` returns the LUI pre-activation."""
        raise NotImplementedError

    def set_neuron(
        self,
        group: str,
        index: tuple[int, ...],
        weights: np.ndarray,
        bias: float,
        p: float,
    ) -> None:
        """Set the raw parameters of one neuron from effective ones."""
        self.params[f"{group}.omega"][index] = invert_weights(
            np.asarray(weights, dtype=np.float64).reshape(-1), self.weight_mode
        )
        self.params[f"{group}.beta"][index] = invert_bias(bias, self.bias_mode)
        self.params[f"{group}.p"][index] = p

    def project_biases(self) -> None:
        """Apply the bias projection of the projected mode to the raw biases."""
        if self.bias_mode != BiasMode.PROJECTED:
            return
        for group in self.groups():
            weights = effective_weights(
                self.params[f"{group.name}.omega"], self.weight_mode, self.dual_scale
            ).value
            key = f"{group.name}.beta"
            self.params[key] = project_raw_bias(self.params[key], weights)


class BiselLayer(Layer):
    """N x K spatial BiSE followed by K LUI over the N channels."""

    kind = LayerKind.BISEL

    def groups(self) -> list[NeuronGroup]:
        n_in, n_out, size = self.spec.in_channels, self.spec.out_channels, self.spec.kernel_size
        return [
            NeuronGroup("bise", (n_in, n_out), (size, size)),
            NeuronGroup("lui", (n_out,), (n_in,)),
        ]

    def forward(
        self, x: Tensor, effective: Mapping[str, GroupTensors], activate: bool = True
    ) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ChannelMismatchError(
                f"BiSEL layer with {self.spec.in_channels} channels got input {x.shape}"
            )
        size = self.spec.kernel_size
        bise = effective["bise"]
        kernels = ad.reshape(
            bise.weights, (self.spec.in_channels, self.spec.out_channels, size, size)
        )
        y = bise_stage(x, kernels, bise.bias, bise.p)
        lui = effective["lui"]
        return lui_stage(y, lui.weights, lui.bias, lui.p, activate)


class DenseLuiLayer(Layer):
    """Fully connected layer of LUI neurons."""

    kind = LayerKind.DENSE_LUI

    def groups(self) -> list[NeuronGroup]:
        return [NeuronGroup("lui", (self.spec.out_channels,), (self.spec.in_channels,))]

    def forward(
        self, x: Tensor, effective: Mapping[str, GroupTensors], activate: bool = True
    ) -> Tensor:
        batch = x.shape[0]
        x = ad.reshape(x, (batch, -1, 1, 1))
        if x.shape[1] != self.spec.in_channels:
            raise ChannelMismatchError(
                f"Dense layer with {self.spec.in_channels} inputs got {x.shape[1]} values"
            )
        lui = effective["lui"]
        out = lui_stage(x, lui.weights, lui.bias, lui.p, activate)
        return ad.reshape(out, (batch, self.spec.out_channels))


def build_layer(
    spec: LayerSpec, weight_mode: WeightMode, bias_mode: BiasMode, dual_scale: float
) -> Layer:
    """Create the layer class matching a layer spec."""
    if spec.kind == LayerKind.BISEL:
        return BiselLayer(spec, weight_mode, bias_mode, dual_scale)
    return DenseLuiLayer(spec, weight_mode, bias_mode, dual_scale)


class BimonnModel:
    """Stack of morphological layers."""

    def __init__(self, architecture: ArchitectureConfig, dual_scale: float = constants.DUAL_SCALE):
        """Initialize BimonnModel class.

        Parameters
        ----------
        architecture : ArchitectureConfig
            Layers and reparametrizations
        dual_scale : float, optional
            Sum of the effective weights in dual mode, by default 2 * xi^-1(0.95)
        """
        self.architecture = architecture
        self.dual_scale = dual_scale
        self.layers = [
            build_layer(spec, architecture.weight_mode, architecture.bias_mode, dual_scale)
            for spec in architecture.layers
        ]

    @property
    def last_activation(self) -> LastActivation:
        """Activation of the last layer."""
        return self.architecture.last_activation

    def parameters(self) -> dict[str, np.ndarray]:
        """Raw parameters keyed ``layers.<i>.<group>.<name>``."""
        return {
            f"layers.{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.params.items()
        }

    def set_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        """Replace raw parameters, keys as returned by ``parameters``."""
        for key, value in params.items():
            _, index, name = key.split(".", 2)
            layer = self.layers[int(index)]
            if name not in layer.params or layer.params[name].shape != np.shape(value):
                raise LayerError(f"Unknown parameter or shape mismatch for {key}")
            layer.params[name] = np.array(value, dtype=np.float64)

    def bind(self, tape: ad.Tape) -> dict[str, Tensor]:
        """Register every raw parameter as a leaf of the tape."""
        return {key: tape.leaf(value, key) for key, value in self.parameters().items()}

    def effective(
        self, leaves: Optional[Mapping[str, Tensor]] = None
    ) -> list[dict[str, GroupTensors]]:
        """Effective parameters per layer, constant tensors when no leaves are given."""
        result = []
        for index, layer in enumerate(self.layers):
            tensors = {
                name: leaves[f"layers.{index}.{name}"] if leaves is not None else Tensor(value)
                for name, value in layer.params.items()
            }
            result.append(layer.effective(tensors))
        return result

    def forward(
        self,
        x: Union[np.ndarray, Tensor],
        effective: Optional[list[dict[str, GroupTensors]]] = None,
    ) -> Tensor:
        """Network output.

        With a softmax head the last layer returns its pre-activation, the class logits.
        """
        effective = effective if effective is not None else self.effective()
        out = ad.as_tensor(x)
        last = len(self.layers) - 1
        for index, (layer, tensors) in enumerate(zip(self.layers, effective)):
            activate = index < last or self.last_activation == LastActivation.TANH
            out = layer.forward(out, tensors, activate)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Network output as an array, class probabilities for a softmax head."""
        out = self.forward(x).value
        if self.last_activation == LastActivation.SOFTMAX:
            shifted = np.exp(out - out.max(axis=1, keepdims=True))
            return shifted / shifted.sum(axis=1, keepdims=True)
        return out

    def neurons(self) -> Iterator[NeuronView]:
        """Every neuron with its effective parameters, in layer and group order."""
        for index, (layer, tensors) in enumerate(zip(self.layers, self.effective())):
            for group in layer.groups():
                part = tensors[group.name]
                for lead in np.ndindex(*group.lead_shape):
                    yield NeuronView(
                        index,
                        group.name,
                        lead,
                        group.kernel_shape,
                        part.weights.value[lead],
                        float(part.bias.value[lead]),
                        float(part.p.value[lead]),
                    )

    def project_biases(self) -> None:
        """Project the raw biases of projected mode layers."""
        for layer in self.layers:
            layer.project_biases()

    def neuron_count(self) -> int:
        """Number of BiSE and LUI neurons."""
        return sum(
            int(np.prod(group.lead_shape)) for layer in self.layers for group in layer.groups()
        )

    def log_summary(self) -> None:
        """Log the architecture."""
        for index, layer in enumerate(self.layers):
            spec = layer.spec
            logging.info(
                f"Layer {index}: {spec.kind.value} {spec.in_channels}->{spec.out_channels}"
                f" kernel {spec.kernel_size}"
            )
