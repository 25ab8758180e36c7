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

"""Morphological regularization losses.

Each loss measures how far a neuron's effective parameters are from a set of morphological
parameters: constant weights over a structuring element, or the activable parameters. The
structuring elements and active constraint sets are chosen from the current values and held
constant while differentiating.
"""

import logging
from typing import Optional

import numpy as np
from bimonn import autodiff as ad
from bimonn import constants
from bimonn.autodiff import ArrayLike, Tensor
from bimonn.binarize import BinarizationError, project_activable
from bimonn.constants import Operation, ReguVariant
from bimonn.layers import BimonnModel, GroupTensors
from bimonn.mdl.settings import ReguConfig

DUAL_ACTIVE = 1e-10


class RegularizationError(Exception):
    """Exception raised for errors in regularization losses."""

    def __init__(self, message: str):
        """Initialize RegularizationError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


def _nonnegative(weights: Tensor) -> None:
    if np.any(weights.value < 0):
        raise RegularizationError("Morphological regularization needs nonnegative weights")


def constant_set_loss(weights: ArrayLike, mask: np.ndarray) -> Tensor:
    """Squared distance to constant weights over ``mask``, per neuron along the last axis."""
    weights = ad.as_tensor(weights)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise RegularizationError("Structuring element of a regularized neuron is empty")
    squares = ad.reduce_sum(weights * weights, axis=-1)
    inside = ad.reduce_sum(weights * mask, axis=-1)
    return squares - inside * inside / counts


def _threshold_loss(weights: ArrayLike, ratio: float) -> Tensor:
    weights = ad.as_tensor(weights)
    _nonnegative(weights)
    threshold = ratio * weights.value.mean(axis=-1, keepdims=True)
    return constant_set_loss(weights, weights.value > threshold)


def loss_unif(weights: ArrayLike) -> Tensor:
    """Distance to constant weights above two thirds of the mean weight."""
    return _threshold_loss(weights, constants.UNIF_THRESHOLD_RATIO)


def loss_normal(weights: ArrayLike) -> Tensor:
    """Distance to constant weights above three quarters of the mean weight."""
    return _threshold_loss(weights, constants.NORMAL_THRESHOLD_RATIO)


def optimal_constant_mask(weights: np.ndarray) -> np.ndarray:
    """Thresholded set closest to constant weights, per neuron along the last axis.

    Sorting the weights decreasingly, the candidate sets are prefixes ending where the value
    drops; ``sum(W^2) - prefix_sum^2 / prefix_length`` is minimized over them.
    """
    weights = np.asarray(weights, dtype=np.float64)
    ordered = -np.sort(-weights, axis=-1)
    lengths = np.arange(1, weights.shape[-1] + 1)
    prefix = np.cumsum(ordered, axis=-1)
    distances = np.sum(weights**2, axis=-1, keepdims=True) - prefix**2 / lengths
    ends = np.concatenate(
        [ordered[..., :-1] > ordered[..., 1:], np.ones(ordered.shape[:-1] + (1,), dtype=bool)],
        axis=-1,
    )
    best = np.argmin(np.where(ends, distances, np.inf), axis=-1)
    cutoff = np.take_along_axis(ordered, best[..., None], axis=-1)
    return weights >= cutoff


def loss_exact(weights: ArrayLike) -> Tensor:
    """Distance to the closest set of constant weights over a thresholded element."""
    weights = ad.as_tensor(weights)
    _nonnegative(weights)
    return constant_set_loss(weights, optimal_constant_mask(weights.value))


def _frozen_active_set_loss(x: Tensor, rows: np.ndarray) -> Tensor:
    """Squared distance to ``{rows @ x = 0}``, that is ``r^T (A A^T)^+ r`` with ``r = A x``."""
    if rows.shape[0] == 0:
        return Tensor(0.0)
    inverse = np.linalg.pinv(rows @ rows.T)
    residual = ad.einsum("ij,j->i", rows, x)
    return ad.reduce_sum(residual * ad.einsum("ij,j->i", inverse, residual))


def loss_acti(
    weights: ArrayLike,
    bias: ArrayLike,
    delta: float = 0.5,
    activable_cap: int = constants.ACTIVABLE_CAP,
    warnings: Optional[list[str]] = None,
) -> Tensor:
    """Squared distance to the nearest activable parameters of a single neuron.

    Parameters
    ----------
    weights : ArrayLike
        Nonnegative effective weights, shape (cells,)
    bias : ArrayLike
        Effective bias, scalar
    delta : float, optional
        Input margin of the activable set, by default 0.5
    activable_cap : int, optional
        Kernels above this many cells use ``loss_exact`` instead, by default 64
    warnings : Optional[list[str]], optional
        Receives a message when the projection fails and ``loss_exact`` is used

    Returns
    -------
    Tensor
        Scalar loss, differentiable with the optimal structuring element and the active
        constraints held fixed
    """
    weights, bias = ad.as_tensor(weights), ad.as_tensor(bias)
    _nonnegative(weights)
    if weights.ndim != 1 or bias.ndim != 0:
        raise RegularizationError("loss_acti works on one neuron at a time")
    if weights.shape[0] > activable_cap:
        return loss_exact(weights)
    try:
        result = project_activable(weights.value, float(bias.value), delta)
    except BinarizationError as err:
        message = f"Activable projection failed, using the exact loss: {err.message}"
        logging.warning(message)
        if warnings is not None:
            warnings.append(message)
        return loss_exact(weights)

    shifted_count = int(result.shifted.sum())
    closed_form = (
        result.operation == Operation.DILATION
        and delta == 0.5
        and result.sum_dual > DUAL_ACTIVE
        and shifted_count > 0
    )
    if not closed_form:
        active = result.rows[result.duals > DUAL_ACTIVE]
        x = ad.concat([weights, ad.reshape(bias, (1,))])
        return _frozen_active_set_loss(x, active)

    tight, zeroed, shifted = result.tight, result.zeroed, result.shifted
    tight_sum = ad.reduce_sum(weights * tight)
    shifted_sum = ad.reduce_sum(weights * shifted)
    target_bias = (shifted_count * (bias + tight_sum) + shifted_sum) / float(result.denominator)
    dual = (shifted_sum - target_bias) / float(shifted_count)
    raised = (weights - target_bias) * tight
    return (
        ad.reduce_sum(weights * weights * zeroed)
        + shifted_count * dual * dual
        + ad.reduce_sum(raised * raised)
        + (bias - target_bias) ** 2
    )


def _one_hot(size: int, index: int) -> np.ndarray:
    vector = np.zeros(size)
    vector[index] = 1.0
    return vector


def _group_loss(part: GroupTensors, cfg: ReguConfig, warnings: Optional[list[str]]) -> Tensor:
    if cfg.variant == ReguVariant.UNIF:
        return ad.reduce_sum(loss_unif(part.weights))
    if cfg.variant == ReguVariant.NORMAL:
        return ad.reduce_sum(loss_normal(part.weights))
    if cfg.variant == ReguVariant.EXACT:
        return ad.reduce_sum(loss_exact(part.weights))
    cells = part.weights.shape[-1]
    count = int(np.prod(part.bias.shape))
    weights = ad.reshape(part.weights, (count, cells))
    biases = ad.reshape(part.bias, (count,))
    total = Tensor(0.0)
    for index in range(count):
        selector = _one_hot(count, index)
        row = ad.einsum("mn,m->n", weights, selector)
        bias = ad.reduce_sum(biases * selector)
        total = total + loss_acti(row, bias, cfg.delta, cfg.activable_cap, warnings)
    return total


def regu_total(
    model: BimonnModel,
    cfg: ReguConfig,
    batch_index: int,
    effective: Optional[list[dict[str, GroupTensors]]] = None,
    warnings: Optional[list[str]] = None,
) -> Tensor:
    """Weighted morphological loss over every BiSE and LUI neuron.

    Parameters
    ----------
    model : BimonnModel
        Model to regularize
    cfg : ReguConfig
        Variant, coefficient and delay
    batch_index : int
        Index of the current batch, the loss is zero before ``cfg.delay_batches``
    effective : Optional[list[dict[str, GroupTensors]]], optional
        Effective parameters on a tape, by default constants from the model
    warnings : Optional[list[str]], optional
        Receives fallbacks taken by ``loss_acti``

    Returns
    -------
    Tensor
        ``c * sum(losses)``, or a zero constant
    """
    if cfg.variant == ReguVariant.NONE or cfg.c == 0 or batch_index < cfg.delay_batches:
        return Tensor(0.0)
    effective = effective if effective is not None else model.effective()
    total = Tensor(0.0)
    for tensors in effective:
        for part in tensors.values():
            total = total + _group_loss(part, cfg, warnings)
    return cfg.c * total
