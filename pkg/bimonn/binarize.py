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

"""Turning trained neurons into binary morphological operations.

A neuron with effective weights ``W`` and bias ``b`` is activated for an operation and a
structuring element ``S`` when its bias lies between the two activation bounds; its thresholded
output then equals the operation on every almost binary input. Activated neurons are binarized
exactly. Others are replaced by the nearest activable parameters or by the nearest set of
constant weights.

Weights are always flattened over the kernel and structuring elements are boolean masks over
the same cells.
"""

import logging
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
from bimonn import constants, morphology
from bimonn.constants import LastActivation, LayerKind, Operation, PointwiseOp, Provenance
from bimonn.constants import Strategy
from bimonn.autodiff import Tensor
from bimonn.layers import BimonnModel, NeuronView, build_layer, xi
from bimonn.mdl.pipeline import (
    ActivationReport,
    BinarizedNeuron,
    BinaryPipeline,
    FloatGroup,
    FloatLayer,
    NeuronActivation,
    PipelineLayer,
)
from bimonn.morphology import BitImage, StructuringElement
from bimonn.qpsolve import QpProblem, QpSolution, qp_project
from pydantic import BaseModel

Mask = Union[np.ndarray, StructuringElement]


class BinarizationError(Exception):
    """Exception raised for errors while binarizing neurons or running binary pipelines."""

    def __init__(self, message: str):
        """Initialize BinarizationError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class NotActivatedError(BinarizationError):
    """Exception raised when an operation needs an activated neuron."""

    pass


class ProjectionError(BinarizationError):
    """Exception raised when no projection candidate could be solved."""

    pass


class PipelineArityError(BinarizationError):
    """Exception raised when an input does not match the pipeline channels."""

    pass


def _flat_mask(se: Mask, size: int) -> np.ndarray:
    mask = se.mask if isinstance(se, StructuringElement) else np.asarray(se, dtype=bool)
    mask = mask.reshape(-1)
    if mask.size != size:
        raise BinarizationError(f"Structuring element with {mask.size} cells for {size} weights")
    if not mask.any():
        raise BinarizationError("Structuring element must not be empty")
    return mask


def _check_delta(delta: float) -> None:
    if not 0.0 < delta <= 0.5:
        raise BinarizationError(f"Margin must lie in (0, 0.5], got {delta}")


####################################################################################################
# Activation
####################################################################################################


class ActivationBounds(NamedTuple):
    """Bias interval of each operation, ``lower <= b < upper``."""

    lower_dilation: float
    upper_dilation: float
    lower_erosion: float
    upper_erosion: float
    delta: float

    def bracket(self, operation: Operation, bias: float) -> bool:
        """Whether the bias activates the operation."""
        if operation == Operation.DILATION:
            return self.lower_dilation <= bias < self.upper_dilation
        return self.lower_erosion <= bias < self.upper_erosion


def activation_bounds(weights: np.ndarray, se: Mask, delta: float = 0.5) -> ActivationBounds:
    """Activation bounds of weights for a structuring element and an input margin.

    Parameters
    ----------
    weights : np.ndarray
        Effective weights over the kernel
    se : Mask
        Structuring element over the same cells
    delta : float, optional
        Input margin, by default 0.5

    Returns
    -------
    ActivationBounds
        Both operations' bounds; the erosion bounds mirror the dilation ones around ``sum(W)``
    """
    _check_delta(delta)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    mask = _flat_mask(se, weights.size)
    positive = np.maximum(weights, 0.0)
    negative = np.minimum(weights, 0.0)
    lower = positive[~mask].sum() + (0.5 - delta) * positive[mask].sum()
    upper = (0.5 + delta) * weights[mask].min() + negative.sum()
    total = weights.sum()
    return ActivationBounds(lower, upper, total - upper, total - lower, delta)


def activated_operations(
    weights: np.ndarray, bias: float, delta: float = 0.5
) -> list[tuple[Operation, np.ndarray]]:
    """Every (operation, structuring element) the neuron is activated for.

    Only the two thresholded candidates can be activated, so at most two results are returned;
    both occur for degenerate kernels such as a single cell.
    """
    _check_delta(delta)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    positive = np.maximum(weights, 0.0).sum()
    negative = np.minimum(weights, 0.0).sum()
    thresholds = {
        Operation.DILATION: (bias - negative) / (0.5 + delta),
        Operation.EROSION: (positive - bias) / (0.5 + delta),
    }
    found = []
    for operation, threshold in thresholds.items():
        mask = weights > threshold - constants.TIE_TOLERANCE
        if mask.any() and activation_bounds(weights, mask, delta).bracket(operation, bias):
            found.append((operation, mask))
    return found


def check_activated(
    weights: np.ndarray, bias: float, delta: float = 0.5
) -> Optional[tuple[Operation, np.ndarray]]:
    """First operation and structuring element the neuron is activated for, None if none.

    A None result certifies that no structuring element activates the neuron.
    """
    found = activated_operations(weights, bias, delta)
    return found[0] if found else None


def delta_out(
    weights: np.ndarray,
    bias: float,
    p: float,
    operation: Operation,
    se: Mask,
    delta: float = 0.5,
) -> float:
    """Output margin of an activated neuron.

    Raises
    ------
    NotActivatedError
        If the bias does not activate the operation
    BinarizationError
        If the scaling is zero
    """
    if p == 0:
        raise BinarizationError("A neuron with zero scaling has no output margin")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    bounds = activation_bounds(weights, se, delta)
    if not bounds.bracket(operation, bias):
        raise NotActivatedError(f"Bias {bias} does not activate {operation.value}")
    if operation == Operation.EROSION:
        bias = weights.sum() - bias
    scale = abs(p)
    below = 0.5 - xi(scale * (bounds.lower_dilation - bias))
    above = xi(scale * (bounds.upper_dilation - bias)) - 0.5
    return float(min(below, above))


####################################################################################################
# Projections
####################################################################################################


class ProjectionResult(BaseModel):
    """Nearest activable parameters of a neuron."""

    operation: Operation
    """Operation of the optimal candidate"""
    se_mask: np.ndarray
    """Structuring element of the optimal candidate, flat"""
    weights: np.ndarray
    """Projected weights"""
    bias: float
    """Projected bias"""
    rows: np.ndarray
    """Constraint rows of the optimal candidate over (weights, bias)"""
    duals: np.ndarray
    """Multiplier per constraint row"""
    sum_dual: float = 0.0
    """Multiplier of the off-element sum row (dilation) or the element sum row (erosion)"""
    tight: np.ndarray
    """Element cells whose bias row is tight"""
    zeroed: np.ndarray
    """Off-element cells projected to zero"""
    shifted: np.ndarray
    """Off-element cells kept positive"""
    denominator: int = 1
    """``|shifted| * (|tight| + 1) + 1``"""
    distance: float
    """Euclidean distance between the anchor and the projection"""
    warnings: list[str] = []
    """Candidates skipped because their projection did not converge"""

    class Config:
        arbitrary_types_allowed = True


def activable_rows(mask: np.ndarray, operation: Operation, delta: float = 0.5) -> np.ndarray:
    """Linear constraints ``rows @ (w, b) <= 0`` describing the activable parameters.

    Rows are ordered: the sum row, one row per element cell, one positivity row per
    off-element cell.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    size = mask.size
    inside, outside = np.flatnonzero(mask), np.flatnonzero(~mask)
    rows = np.zeros((1 + inside.size + outside.size, size + 1))
    if operation == Operation.DILATION:
        rows[0, :size] = np.where(mask, 0.5 - delta, 1.0)
        rows[0, size] = -1.0
        rows[1 + np.arange(inside.size), inside] = -(0.5 + delta)
        rows[1 : 1 + inside.size, size] = 1.0
    else:
        rows[0, :size] = -(0.5 + delta) * mask
        rows[0, size] = 1.0
        rows[1 : 1 + inside.size, :size] = 1.0
        rows[1 + np.arange(inside.size), inside] -= 0.5 + delta
        rows[1 : 1 + inside.size, size] = -1.0
    rows[1 + inside.size + np.arange(outside.size), outside] = -1.0
    return rows


def threshold_candidates(weights: np.ndarray) -> Iterator[np.ndarray]:
    """Sets ``weights >= v`` for every distinct weight value v, largest threshold first."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    for value in np.unique(weights)[::-1]:
        yield weights >= value


def _projection_sets(
    mask: np.ndarray, operation: Operation, solution: QpSolution, anchor: np.ndarray
) -> dict:
    size = mask.size
    inside, outside = np.flatnonzero(mask), np.flatnonzero(~mask)
    sum_dual = float(solution.duals[0])
    bias = float(solution.primal[size])
    tight = np.zeros(size, dtype=bool)
    zeroed = np.zeros(size, dtype=bool)
    if operation == Operation.DILATION:
        tight[inside] = anchor[inside] <= bias
        zeroed[outside] = anchor[outside] <= sum_dual
    else:
        tight[inside] = solution.duals[1 : 1 + inside.size] > constants.QP_TOL
        zeroed[outside] = solution.primal[outside] <= constants.QP_TOL
    shifted = ~mask & ~zeroed
    return dict(
        sum_dual=sum_dual,
        tight=tight,
        zeroed=zeroed,
        shifted=shifted,
        denominator=int(shifted.sum() * (tight.sum() + 1) + 1),
    )


def project_activable(
    weights: np.ndarray,
    bias: float,
    delta: float = 0.5,
    tol: float = constants.QP_TOL,
    max_iter: int = constants.QP_MAX_ITER,
) -> ProjectionResult:
    """Nearest activable parameters over the thresholded candidates and both operations.

    Parameters
    ----------
    weights : np.ndarray
        Nonnegative effective weights
    bias : float
        Effective bias
    delta : float, optional
        Input margin the constraints are built for, by default 0.5
    tol : float, optional
        Projection tolerance, by default 1e-8
    max_iter : int, optional
        Projection iteration limit, by default 20000

    Returns
    -------
    ProjectionResult
        The global minimizer with its multipliers and index sets

    Raises
    ------
    ProjectionError
        If a weight is negative or no candidate projection converged
    """
    _check_delta(delta)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(weights < 0):
        raise ProjectionError("Activable projection needs nonnegative weights")
    anchor = np.append(weights, bias)
    best: Optional[tuple[float, Operation, np.ndarray, np.ndarray, QpSolution]] = None
    warnings = []
    for mask in threshold_candidates(weights):
        for operation in (Operation.DILATION, Operation.EROSION):
            rows = activable_rows(mask, operation, delta)
            problem = QpProblem(anchor=anchor, rows=rows, bounds=np.zeros(rows.shape[0]))
            solution = qp_project(problem, tol, max_iter)
            if not solution.converged:
                message = (
                    f"Skipped {operation.value} candidate with {int(mask.sum())} cells,"
                    " projection did not converge"
                )
                logging.warning(message)
                warnings.append(message)
                continue
            distance = solution.distance(anchor)
            if best is None or distance < best[0]:
                best = (distance, operation, mask, rows, solution)
    if best is None:
        raise ProjectionError("No activable candidate could be projected")
    distance, operation, mask, rows, solution = best
    return ProjectionResult(
        operation=operation,
        se_mask=mask,
        weights=solution.primal[:-1],
        bias=float(solution.primal[-1]),
        rows=rows,
        duals=solution.duals,
        distance=distance,
        warnings=warnings,
        **_projection_sets(mask, operation, solution, weights),
    )


class ConstantProjection(NamedTuple):
    """Nearest set of constant weights."""

    se_mask: np.ndarray
    operation: Operation
    distance: float


def constant_distance(weights: np.ndarray, mask: np.ndarray) -> float:
    """Squared distance from weights to the nearest ``theta * 1_S``, theta > 0."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    return float(np.sum(weights**2) - weights[mask].sum() ** 2 / mask.sum())


def project_constant(weights: np.ndarray, bias: float) -> ConstantProjection:
    """Nearest constant-weight structuring element and the operation the bias points to.

    Raises
    ------
    BinarizationError
        If all weights are zero or a weight is negative
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(weights < 0):
        raise BinarizationError("Constant projection needs nonnegative weights")
    if not np.any(weights > 0):
        raise BinarizationError("Constant projection of all-zero weights")
    best = min(
        threshold_candidates(weights), key=lambda mask: constant_distance(weights, mask)
    )
    operation = Operation.EROSION if bias > weights.sum() / 2.0 else Operation.DILATION
    return ConstantProjection(best, operation, constant_distance(weights, best))


####################################################################################################
# Network binarization
####################################################################################################


class NeuronOutcome(NamedTuple):
    """Binarized neuron with the margin its output carries to the next layer."""

    neuron: BinarizedNeuron
    margin: float
    warnings: list[str]


def binarize_neuron(
    view: NeuronView,
    delta: float,
    strategy: Strategy = Strategy.AUTO,
    activable_cap: int = constants.ACTIVABLE_CAP,
) -> NeuronOutcome:
    """Binarize a single neuron given the margin of its inputs."""
    complement = view.p < 0
    shape = view.kernel_shape
    hit = check_activated(view.weights, view.bias, delta) if view.p != 0 else None
    if hit is not None:
        operation, mask = hit
        margin = delta_out(view.weights, view.bias, view.p, operation, mask, delta)
        if margin > 0:
            neuron = BinarizedNeuron.from_mask(
                operation, mask.reshape(shape), Provenance.EXACT, complement, 0.0, margin
            )
            return NeuronOutcome(neuron, margin, [])

    warnings = []
    weights = view.weights
    if np.any(weights < 0):
        logging.debug(f"Clipping negative weights of {view.group}{list(view.index)}")
        weights = np.maximum(weights, 0.0)
    if strategy == Strategy.AUTO and weights.size <= activable_cap and np.any(weights > 0):
        try:
            result = project_activable(weights, view.bias, delta)
            neuron = BinarizedNeuron.from_mask(
                result.operation,
                result.se_mask.reshape(shape),
                Provenance.PROJ_ACTIVABLE,
                complement,
                result.distance,
            )
            return NeuronOutcome(neuron, 0.5, result.warnings)
        except BinarizationError as err:
            logging.warning(f"Falling back to constant projection: {err.message}")
            warnings.append(err.message)
    try:
        constant = project_constant(weights, view.bias)
        mask, operation, distance = constant.se_mask, constant.operation, constant.distance
    except BinarizationError as err:
        message = (
            f"Layer {view.layer} {view.group}{list(view.index)}: {err.message},"
            " emitting an erosion by the full window"
        )
        logging.warning(message)
        warnings.append(message)
        mask, operation, distance = np.ones(weights.size, dtype=bool), Operation.EROSION, 0.0
    neuron = BinarizedNeuron.from_mask(
        operation, mask.reshape(shape), Provenance.PROJ_CONSTANT, complement, distance
    )
    return NeuronOutcome(neuron, 0.5, warnings)


def _walk(
    model: BimonnModel,
    visit: Callable[[NeuronView, float], tuple[object, float]],
    layers: Optional[int] = None,
) -> list[dict[str, dict[tuple[int, ...], object]]]:
    """Visit neurons layer by layer, propagating the channel margins.

    ``visit`` returns a result and the margin of the neuron output. A LUI reads the margins of
    its inputs and takes the smallest; a dense layer reads every previous output.
    """
    views: dict[int, list[NeuronView]] = {}
    for view in model.neurons():
        views.setdefault(view.layer, []).append(view)
    # inputs are binary images
    margins = np.full(model.layers[0].spec.in_channels, 0.5)
    results = []
    count = len(model.layers) if layers is None else layers
    for index in range(count):
        layer = model.layers[index]
        found: dict[str, dict[tuple[int, ...], object]] = {"bise": {}, "lui": {}}
        if layer.kind == LayerKind.BISEL:
            spec = layer.spec
            bise_margins = np.zeros((spec.in_channels, spec.out_channels))
            for view in (v for v in views[index] if v.group == "bise"):
                found["bise"][view.index], bise_margins[view.index] = visit(
                    view, float(margins[view.index[0]])
                )
            out = np.zeros(spec.out_channels)
            for view in (v for v in views[index] if v.group == "lui"):
                column = float(bise_margins[:, view.index[0]].min())
                found["lui"][view.index], out[view.index] = visit(view, column)
        else:
            smallest = float(margins.min())
            out = np.zeros(layer.spec.out_channels)
            for view in views[index]:
                found["lui"][view.index], out[view.index] = visit(view, smallest)
        margins = out
        results.append(found)
    return results


def _float_layer(model: BimonnModel, index: int) -> FloatLayer:
    layer = model.layers[index]
    tensors = model.effective()[index]
    groups = {
        group.name: FloatGroup(
            lead_shape=list(group.lead_shape),
            weights=tensors[group.name].weights.value.reshape(-1).tolist(),
            bias=tensors[group.name].bias.value.reshape(-1).tolist(),
            p=tensors[group.name].p.value.reshape(-1).tolist(),
        )
        for group in layer.groups()
    }
    return FloatLayer(spec=layer.spec, last_activation=model.last_activation, groups=groups)


def binarize_network(
    model: BimonnModel,
    strategy: Strategy = Strategy.AUTO,
    skip_last: bool = False,
    activable_cap: int = constants.ACTIVABLE_CAP,
) -> BinaryPipeline:
    """Binarize a trained network layer by layer.

    Parameters
    ----------
    model : BimonnModel
        Trained model
    strategy : Strategy, optional
        ``auto`` tries the activable projection for kernels up to ``activable_cap`` cells,
        ``force_constant`` always uses the constant projection, by default auto
    skip_last : bool, optional
        Keep the last layer in floating point, by default False
    activable_cap : int, optional
        Largest kernel for the activable projection, by default 64

    Returns
    -------
    BinaryPipeline
        The binary layers, the float head if kept, and the fallbacks taken
    """
    warnings: list[str] = []

    def visit(view: NeuronView, delta: float) -> tuple[BinarizedNeuron, float]:
        outcome = binarize_neuron(view, delta, strategy, activable_cap)
        warnings.extend(outcome.warnings)
        return outcome.neuron, outcome.margin

    binary_count = len(model.layers) - 1 if skip_last else len(model.layers)
    found = _walk(model, visit, binary_count)
    layers = []
    for layer, neurons in zip(model.layers, found):
        spec = layer.spec
        bises = None
        if layer.kind == LayerKind.BISEL:
            bises = [
                [neurons["bise"][(n, k)] for k in range(spec.out_channels)]
                for n in range(spec.in_channels)
            ]
        layers.append(
            PipelineLayer(
                kind=layer.kind,
                in_channels=spec.in_channels,
                out_channels=spec.out_channels,
                bises=bises,
                luis=[neurons["lui"][(k,)] for k in range(spec.out_channels)],
            )
        )
    head = _float_layer(model, len(model.layers) - 1) if skip_last else None
    pipeline = BinaryPipeline(layers=layers, float_head=head, warnings=warnings)
    exact = sum(
        neuron.provenance == Provenance.EXACT
        for layer in pipeline.layers
        for neuron in _pipeline_neurons(layer)
    )
    logging.info(f"Binarized {len(pipeline.layers)} layers, {exact} exact neurons")
    return pipeline


def _pipeline_neurons(layer: PipelineLayer) -> list[BinarizedNeuron]:
    rows = layer.bises or []
    return [neuron for row in rows for neuron in row] + list(layer.luis)


def activated_ratio(model: BimonnModel, chain: bool = True) -> ActivationReport:
    """Share of neurons passing the linear check.

    Parameters
    ----------
    model : BimonnModel
        Model to inspect
    chain : bool, optional
        Propagate margins as binarization does; otherwise every neuron is checked at margin
        1/2, by default True

    Returns
    -------
    ActivationReport
        Overall, BiSE and LUI ratios with per neuron rows
    """
    rows: list[NeuronActivation] = []

    def visit(view: NeuronView, delta: float) -> tuple[None, float]:
        delta = delta if chain else 0.5
        hit = check_activated(view.weights, view.bias, delta) if view.p != 0 else None
        margin = 0.5
        if hit is not None:
            margin = delta_out(view.weights, view.bias, view.p, hit[0], hit[1], delta)
            if margin <= 0:
                hit, margin = None, 0.5
        rows.append(
            NeuronActivation(
                layer=view.layer,
                group=view.group,
                index=list(view.index),
                activated=hit is not None,
                operation=hit[0] if hit is not None else None,
                delta=delta,
            )
        )
        return None, margin

    _walk(model, visit)

    def share(selected: Sequence[NeuronActivation]) -> Optional[float]:
        if not selected:
            return None
        return sum(row.activated for row in selected) / len(selected)

    return ActivationReport(
        margin="chain" if chain else "fixed",
        ratio=share(rows) or 0.0,
        bise_ratio=share([row for row in rows if row.group == "bise"]),
        lui_ratio=share([row for row in rows if row.group == "lui"]),
        neurons=rows,
    )


####################################################################################################
# Binary execution
####################################################################################################


def _apply_spatial(neuron: BinarizedNeuron, image: BitImage) -> BitImage:
    se = neuron.structuring_element()
    if neuron.operation == Operation.DILATION:
        out = morphology.dilate(image, se)
    else:
        out = morphology.erode(image, se)
    return morphology.complement(out) if neuron.complement else out


def _combine_channels(neuron: BinarizedNeuron, images: Sequence[BitImage]) -> BitImage:
    op = PointwiseOp.UNION if neuron.operation == Operation.DILATION else PointwiseOp.INTERSECTION
    out = morphology.pointwise(op, images)
    return morphology.complement(out) if neuron.complement else out


def _exec_dense(layer: PipelineLayer, values: np.ndarray) -> np.ndarray:
    if values.size != layer.in_channels:
        raise PipelineArityError(f"Dense layer with {layer.in_channels} inputs got {values.size}")
    out = np.zeros(layer.out_channels, dtype=bool)
    for index, neuron in enumerate(layer.luis):
        picked = values[neuron.selected()]
        hit = picked.any() if neuron.operation == Operation.DILATION else picked.all()
        out[index] = hit != neuron.complement
    return out


def _exec_float_head(head: FloatLayer, values: np.ndarray) -> np.ndarray:
    layer = build_layer(head.spec, constants.WeightMode.IDENTITY, constants.BiasMode.IDENTITY, 1.0)
    for group in layer.groups():
        part = head.groups[group.name]
        lead = tuple(part.lead_shape)
        layer.params[f"{group.name}.omega"] = np.reshape(part.weights, lead + (group.n_cells,))
        layer.params[f"{group.name}.beta"] = np.reshape(part.bias, lead)
        layer.params[f"{group.name}.p"] = np.reshape(part.p, lead)
    tensors = layer.effective({name: Tensor(value) for name, value in layer.params.items()})
    activate = head.last_activation == LastActivation.TANH
    batch = Tensor(np.asarray(values, dtype=np.float64)[None])
    out = layer.forward(batch, tensors, activate).value[0]
    if head.last_activation == LastActivation.SOFTMAX:
        shifted = np.exp(out - out.max(axis=0, keepdims=True))
        return shifted / shifted.sum(axis=0, keepdims=True)
    return out


def _first_kind(pipeline: BinaryPipeline) -> LayerKind:
    if pipeline.layers:
        return pipeline.layers[0].kind
    return pipeline.float_head.spec.kind


def _to_state(
    pipeline: BinaryPipeline, inputs: Union[Sequence[BitImage], np.ndarray]
) -> Union[list[BitImage], np.ndarray]:
    if isinstance(inputs, np.ndarray):
        array = np.asarray(inputs, dtype=bool)
        if _first_kind(pipeline) == LayerKind.DENSE_LUI:
            return array.reshape(-1)
        if array.ndim != 3:
            raise PipelineArityError(
                f"Expected a (channels, height, width) input, got {array.shape}"
            )
        return [BitImage.from_array(channel) for channel in array]
    return list(inputs)


def _flatten(state: Union[list[BitImage], np.ndarray]) -> np.ndarray:
    if isinstance(state, np.ndarray):
        return state
    return np.stack([image.to_array() for image in state]).reshape(-1)


def exec_binary(
    pipeline: BinaryPipeline, inputs: Union[Sequence[BitImage], np.ndarray]
) -> Union[list[BitImage], np.ndarray]:
    """Run a binary pipeline on one sample.

    Parameters
    ----------
    pipeline : BinaryPipeline
        Pipeline to run
    inputs : Union[Sequence[BitImage], np.ndarray]
        One bit image per input channel, a boolean (channels, height, width) array, or a
        boolean vector for pipelines starting with a dense layer

    Returns
    -------
    Union[list[BitImage], np.ndarray]
        Output channels, a boolean vector after dense layers, or the float head output

    Raises
    ------
    PipelineArityError
        If the input does not have the channels the pipeline expects
    """
    state = _to_state(pipeline, inputs)
    for layer in pipeline.layers:
        if layer.kind == LayerKind.DENSE_LUI:
            state = _exec_dense(layer, _flatten(state))
            continue
        if isinstance(state, np.ndarray) or len(state) != layer.in_channels:
            count = 1 if isinstance(state, np.ndarray) else len(state)
            raise PipelineArityError(
                f"BiSEL layer with {layer.in_channels} channels got {count}"
            )
        outputs = []
        for k, lui in enumerate(layer.luis):
            images = [_apply_spatial(layer.bises[n][k], state[n]) for n in lui.selected()]
            outputs.append(_combine_channels(lui, images))
        state = outputs
    if pipeline.float_head is None:
        return state
    if isinstance(state, np.ndarray):
        values = state.astype(np.float64)
    else:
        values = np.stack([image.to_array() for image in state]).astype(np.float64)
    return _exec_float_head(pipeline.float_head, values)


def exec_binary_batch(pipeline: BinaryPipeline, batch: np.ndarray) -> np.ndarray:
    """Run a pipeline on every sample of a batch, outputs stacked as arrays."""
    outputs = []
    for sample in np.asarray(batch):
        out = exec_binary(pipeline, sample)
        if isinstance(out, list):
            out = np.stack([image.to_array() for image in out])
        outputs.append(out)
    return np.stack(outputs)


def _render_mask(neuron: BinarizedNeuron) -> str:
    mask = neuron.mask()
    if mask.ndim == 1:
        return f"channels {neuron.selected()}"
    rows = ["".join("#" if bit else "." for bit in row) for row in mask]
    return f"{mask.shape[0]}x{mask.shape[1]} {'/'.join(rows)}"


def _describe_neuron(label: str, neuron: BinarizedNeuron) -> str:
    line = f"  {label}: {neuron.operation.value} {_render_mask(neuron)} {neuron.provenance.value}"
    if neuron.complement:
        line += " complement"
    if neuron.provenance != Provenance.EXACT:
        line += f" distance={neuron.distance:.4g}"
    return line


def describe_pipeline(pipeline: BinaryPipeline) -> str:
    """Human readable listing of a pipeline's structure."""
    lines = []
    for index, layer in enumerate(pipeline.layers):
        lines.append(f"layer {index} {layer.kind.value} {layer.in_channels}->{layer.out_channels}")
        for n, row in enumerate(layer.bises or []):
            for k, neuron in enumerate(row):
                lines.append(_describe_neuron(f"bise[{n},{k}]", neuron))
        for k, neuron in enumerate(layer.luis):
            lines.append(_describe_neuron(f"lui[{k}]", neuron))
    if pipeline.float_head is not None:
        spec = pipeline.float_head.spec
        lines.append(
            f"layer {len(pipeline.layers)} {spec.kind.value} {spec.in_channels}->"
            f"{spec.out_channels} float {pipeline.float_head.last_activation.value}"
        )
    return "\n".join(lines) + "\n"
