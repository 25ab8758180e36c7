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

"""Initialization and training of morphological networks.

Initialization follows a variance analysis of the BiSE pre-activation: with the scaling ``p``
set to zero every neuron starts at the midpoint of its smooth threshold, and weights are drawn
so that once ``p`` moves away from zero the outputs stay centered and reach the saturation
level ``h`` one standard deviation away from the bias.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from bimonn import autodiff as ad
from bimonn import constants
from bimonn.autodiff import Tensor
from bimonn.constants import BiasMode, LossKind, ReguVariant, ScheduleAction, WeightMode
from bimonn.layers import (
    BimonnModel,
    BiseParams,
    effective_weights,
    invert_bias,
    invert_weights,
    softplus_inverse,
    xi_inverse,
)
from bimonn.mdl.settings import InitConfig, ReguConfig, RunConfig, TrainConfig
from bimonn.regularize import regu_total
from pydantic import BaseModel


class TrainingError(Exception):
    """Exception raised for errors while initializing or training a model."""

    def __init__(self, message: str):
        """Initialize TrainingError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class InitializationError(TrainingError):
    """Exception raised when initialization statistics are degenerate."""

    pass


class TrainingDivergedError(TrainingError):
    """Exception raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, iteration: int):
        """Initialize TrainingDivergedError class.

        Parameters
        ----------
        message : str
            Error message
        iteration : int
            Iteration the divergence was detected at
        """
        self.iteration = iteration
        super().__init__(f"Iteration {iteration}: {message}")


####################################################################################################
# Initialization
####################################################################################################


class InitStatistics(BaseModel):
    """Scaling proxy and weight distribution of a layer."""

    p_prime: float
    """Scaling proxy used by the variance analysis"""
    mu: float
    """Mean of the effective weights"""
    sigma: float
    """Variance of the effective weights"""

    @property
    def support(self) -> tuple[float, float]:
        """Bounds of the uniform weight distribution."""
        half = math.sqrt(3.0 * self.sigma)
        return self.mu - half, self.mu + half


def init_statistics(n_cells: int, h: float = constants.SATURATION_LEVEL) -> InitStatistics:
    """Weight distribution for a kernel of ``n_cells`` cells.

    Raises
    ------
    InitializationError
        If the kernel is empty or the variance is not positive
    """
    if n_cells < 1:
        raise InitializationError(f"Kernel needs at least one cell, got {n_cells}")
    root3 = math.sqrt(3.0)
    p_prime = (root3 + 2.0) / (8.0 * float(xi_inverse(h))) * math.sqrt(n_cells)
    mu = (root3 + 2.0) / (4.0 * p_prime * math.sqrt(n_cells))
    sigma = 1.0 / (p_prime**2 * n_cells) - mu**2
    if sigma <= 0:
        raise InitializationError(f"Non-positive weight variance {sigma} for {n_cells} cells")
    return InitStatistics(p_prime=p_prime, mu=mu, sigma=sigma)


def init_group(
    lead_shape: tuple[int, ...],
    n_cells: int,
    cfg: InitConfig,
    rng: np.random.Generator,
    weight_mode: WeightMode,
    bias_mode: BiasMode,
    first_stage: bool = False,
    dual_scale: float = constants.DUAL_SCALE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (omega, beta, p) for a grid of neurons sharing a kernel size.

    Parameters
    ----------
    lead_shape : tuple[int, ...]
        Neuron grid shape
    n_cells : int
        Kernel size in cells
    cfg : InitConfig
        Saturation level, bias noise and input mean
    rng : np.random.Generator
        Random generator
    weight_mode : WeightMode
        Weight reparametrization to invert
    bias_mode : BiasMode
        Bias reparametrization to invert
    first_stage : bool, optional
        Whether the neurons read the network input, by default False
    dual_scale : float, optional
        Sum of effective weights in dual mode, by default 2 * xi^-1(0.95)

    Returns
    -------
    tuple[np.ndarray, np.ndarray, np.ndarray]
        Raw weights (lead..., cells), raw biases and scalings, all scalings zero
    """
    stats = init_statistics(n_cells, cfg.h)
    low, high = stats.support
    drawn = rng.uniform(low, high, size=lead_shape + (n_cells,))
    if weight_mode == WeightMode.DUAL:
        omega = softplus_inverse(drawn)
        weights = effective_weights(omega, weight_mode, dual_scale).value
    else:
        omega = invert_weights(drawn, weight_mode)
        weights = drawn
    mean = 0.5
    if first_stage and cfg.input_mean is not None:
        mean = cfg.input_mean
    noise = rng.uniform(-cfg.eps_bias, cfg.eps_bias, size=lead_shape)
    bias = mean * weights.sum(axis=-1) + noise
    return omega, invert_bias(bias, bias_mode), np.zeros(lead_shape)


def init_bise(
    layer_index: int,
    kernel_shape: tuple[int, ...],
    cfg: InitConfig,
    rng: np.random.Generator,
    weight_mode: WeightMode = WeightMode.POSITIVE,
    bias_mode: BiasMode = BiasMode.POSITIVE,
) -> BiseParams:
    """Initialize one neuron, the first layer uses the input mean for its bias."""
    n_cells = int(np.prod(kernel_shape))
    omega, beta, p = init_group(
        (), n_cells, cfg, rng, weight_mode, bias_mode, first_stage=layer_index == 0
    )
    return BiseParams(
        omega=omega.reshape(kernel_shape),
        beta=float(beta),
        p=float(p),
        weight_mode=weight_mode,
        bias_mode=bias_mode,
    )


def init_model(model: BimonnModel, cfg: InitConfig, rng: np.random.Generator) -> None:
    """Initialize every neuron group of a model in place."""
    for index, layer in enumerate(model.layers):
        for position, group in enumerate(layer.groups()):
            omega, beta, p = init_group(
                group.lead_shape,
                group.n_cells,
                cfg,
                rng,
                layer.weight_mode,
                layer.bias_mode,
                first_stage=index == 0 and position == 0,
                dual_scale=layer.dual_scale,
            )
            layer.params[f"{group.name}.omega"] = omega
            layer.params[f"{group.name}.beta"] = beta
            layer.params[f"{group.name}.p"] = p
    logging.info(f"Initialized {model.neuron_count()} neurons, h={cfg.h}, eps={cfg.eps_bias}")


def estimate_input_mean(batch: np.ndarray) -> float:
    """Mean pixel value of a batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise TrainingError("Cannot estimate the input mean of an empty batch")
    return float(batch.mean())


####################################################################################################
# Optimization
####################################################################################################


class AdamState:
    """First and second moment estimates per parameter."""

    def __init__(self):
        self.step = 0
        self.first: dict[str, np.ndarray] = {}
        self.second: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One Adam update, returns the new parameters.

    Raises
    ------
    TrainingDivergedError
        If a gradient is not finite
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient for {name}", state.step + 1)
    state.step += 1
    correction1 = 1.0 - constants.ADAM_BETA1**state.step
    correction2 = 1.0 - constants.ADAM_BETA2**state.step
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            updated[name] = value
            continue
        if grad.shape != value.shape:
            raise TrainingError(f"Gradient of {name} has shape {grad.shape}, not {value.shape}")
        first = state.first.get(name, np.zeros_like(value))
        second = state.second.get(name, np.zeros_like(value))
        first = constants.ADAM_BETA1 * first + (1.0 - constants.ADAM_BETA1) * grad
        second = constants.ADAM_BETA2 * second + (1.0 - constants.ADAM_BETA2) * grad * grad
        state.first[name], state.second[name] = first, second
        step = (first / correction1) / (np.sqrt(second / correction2) + constants.ADAM_EPS)
        updated[name] = value - lr * step
    return updated


def model_step(
    model: BimonnModel, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> None:
    """Adam update of a model followed by the bias projection of projected mode layers."""
    model.set_parameters(adam_step(model.parameters(), grads, state, lr))
    model.project_biases()


def loss_value(kind: LossKind, prediction: Tensor, target: np.ndarray) -> Tensor:
    """Data loss averaged over the batch.

    Parameters
    ----------
    kind : LossKind
        ``mse`` averages over every element, ``bce`` sums over the non-batch axes of a
        prediction in (0, 1), ``ce_softmax`` takes logits and integer labels or one-hot targets
    prediction : Tensor
        Network output, the batch is the first axis
    target : np.ndarray
        Expected output

    Returns
    -------
    Tensor
        Scalar loss
    """
    target = np.asarray(target, dtype=np.float64)
    batch = prediction.shape[0]
    if kind == LossKind.MSE:
        difference = prediction - target
        return ad.mean(difference * difference)
    if kind == LossKind.BCE:
        clipped = ad.clip(prediction, constants.BCE_CLIP, 1.0 - constants.BCE_CLIP)
        terms = target * ad.log(clipped) + (1.0 - target) * ad.log(1.0 - clipped)
        return -ad.reduce_sum(terms) / float(batch)
    if target.shape != prediction.shape:
        labels = target.astype(int).reshape(-1)
        target = np.eye(prediction.shape[1])[labels]
    return -ad.reduce_sum(ad.log_softmax(prediction, axis=1) * target) / float(batch)


class ScheduleState(BaseModel):
    """Counters of the plateau schedule."""

    best: float = math.inf
    """Lowest smoothed loss so far"""
    since_best: int = 0
    """Iterations since the smoothed loss last improved"""
    since_halve: int = 0
    """Iterations since the last improvement or halving"""


def lr_schedule(
    history: Sequence[float],
    state: ScheduleState,
    halve_window: int = constants.DEFAULT_HALVE_WINDOW,
    stop_window: int = constants.DEFAULT_STOP_WINDOW,
    smoothing_window: int = constants.LOSS_SMOOTHING_WINDOW,
) -> ScheduleAction:
    """Decide whether to keep, halve the learning rate or stop, after one more loss."""
    if not history:
        return ScheduleAction.KEEP
    smoothed = float(np.mean(history[-smoothing_window:]))
    if smoothed < state.best:
        state.best = smoothed
        state.since_best = 0
        state.since_halve = 0
        return ScheduleAction.KEEP
    state.since_best += 1
    state.since_halve += 1
    if state.since_best >= stop_window:
        return ScheduleAction.STOP
    if state.since_halve >= halve_window:
        state.since_halve = 0
        return ScheduleAction.HALVE
    return ScheduleAction.KEEP


class MetricRow(BaseModel):
    """Per iteration training log entry."""

    iteration: int
    lr: float
    data_loss: float
    regu_loss: float
    total_loss: float


class TrainResult(BaseModel):
    """Outcome of a training run."""

    iterations: int = 0
    """Optimizer steps performed"""
    final_learning_rate: float
    """Learning rate when training stopped"""
    stop_reason: str = "max_iterations"
    """max_iterations or plateau"""
    rows: list[MetricRow] = []
    """Metrics log"""
    warnings: list[str] = []
    """Regularization fallbacks"""


def write_metrics(rows: Sequence[MetricRow], path: Union[str, Path]) -> None:
    """Write the metrics log as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(list(MetricRow.__fields__))
        for row in rows:
            writer.writerow([getattr(row, name) for name in MetricRow.__fields__])


def _iteration_budget(cfg: TrainConfig, n_samples: int) -> int:
    budget = cfg.max_iterations
    if cfg.epochs is not None:
        budget = min(budget, cfg.epochs * math.ceil(n_samples / cfg.batch_size))
    return budget


def train(
    model: BimonnModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    regu: Optional[ReguConfig] = None,
    metrics_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Train a model in place.

    Parameters
    ----------
    model : BimonnModel
        Initialized model
    inputs : np.ndarray
        Training inputs, the first axis indexes samples
    targets : np.ndarray
        Expected outputs: images for MSE and BCE, labels or one-hot rows for cross entropy
    cfg : TrainConfig
        Optimization settings
    regu : Optional[ReguConfig], optional
        Morphological regularization, by default none
    metrics_path : Optional[Union[str, Path]], optional
        Where to write the metrics CSV, by default nowhere

    Returns
    -------
    TrainResult
        Iterations, final learning rate, stopping reason and the metrics log

    Raises
    ------
    TrainingError
        If the dataset is empty
    TrainingDivergedError
        If the loss or a gradient stops being finite
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets)
    n_samples = inputs.shape[0]
    if n_samples == 0 or targets.shape[0] != n_samples:
        raise TrainingError(f"Need matching nonempty inputs and targets, got {n_samples}")
    regu = regu if regu is not None else ReguConfig()
    rng = np.random.default_rng(cfg.seed)
    budget = _iteration_budget(cfg, n_samples)
    state, schedule = AdamState(), ScheduleState()
    lr = cfg.learning_rate
    history: list[float] = []
    result = TrainResult(final_learning_rate=lr)
    order = rng.permutation(n_samples)
    cursor = 0

    for iteration in range(budget):
        if cursor + cfg.batch_size > n_samples and cursor > 0:
            order, cursor = rng.permutation(n_samples), 0
        picked = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size

        tape = ad.Tape()
        leaves = model.bind(tape)
        effective = model.effective(leaves)
        prediction = model.forward(inputs[picked], effective)
        data_loss = loss_value(cfg.loss, prediction, targets[picked])
        regu_loss = regu_total(model, regu, iteration, effective, result.warnings)
        total = data_loss + regu_loss
        if not np.isfinite(total.value):
            raise TrainingDivergedError("non-finite loss", iteration)
        grads = ad.backward_grad(tape, 1.0, total)
        model_step(model, grads, state, lr)

        row = MetricRow(
            iteration=iteration,
            lr=lr,
            data_loss=data_loss.item(),
            regu_loss=float(regu_loss.value),
            total_loss=total.item(),
        )
        result.rows.append(row)
        result.iterations = iteration + 1
        if iteration % 100 == 0:
            logging.info(
                f"Iteration {iteration}: loss {row.total_loss:.6f} (data {row.data_loss:.6f},"
                f" regu {row.regu_loss:.6f}), lr {lr:.3g}"
            )
        history.append(row.total_loss)
        action = lr_schedule(
            history, schedule, cfg.halve_window, cfg.stop_window, cfg.smoothing_window
        )
        if action == ScheduleAction.HALVE:
            lr /= 2.0
            logging.info(f"Loss plateaued, halving learning rate to {lr:.3g}")
        elif action == ScheduleAction.STOP:
            result.stop_reason = "plateau"
            logging.info(f"Loss plateaued for {cfg.stop_window} iterations, stopping")
            break

    result.final_learning_rate = lr
    if metrics_path is not None:
        write_metrics(result.rows, metrics_path)
    return result


####################################################################################################
# Presets
####################################################################################################

PRESETS: dict[str, dict] = {
    "baseline": {
        "architecture": {"weight_mode": "identity", "bias_mode": "identity"},
        "regu": {"variant": "none"},
        "train": {"learning_rate": 6.2e-3},
    },
    "positive": {
        "architecture": {"weight_mode": "positive", "bias_mode": "positive"},
        "regu": {"variant": "none"},
        "train": {"learning_rate": 9.8e-2},
    },
    "exact": {
        "architecture": {
            "weight_mode": "positive",
            "bias_mode": "projected_reparam",
            "last_activation": "softmax",
        },
        "regu": {"variant": "exact", "c": 0.01, "delay_batches": 10000},
        "train": {"learning_rate": 4.2e-2, "loss": "ce_softmax"},
    },
    "unif": {
        "architecture": {
            "weight_mode": "positive",
            "bias_mode": "projected_reparam",
            "last_activation": "softmax",
        },
        "regu": {"variant": "unif", "c": 0.01, "delay_batches": 20000},
        "train": {"learning_rate": 6.1e-2, "loss": "ce_softmax"},
    },
    "normal": {
        "architecture": {
            "weight_mode": "positive",
            "bias_mode": "identity",
            "last_activation": "softmax",
        },
        "regu": {"variant": "normal", "c": 0.001, "delay_batches": 10000},
        "train": {"learning_rate": 5.4e-2, "loss": "ce_softmax"},
    },
}

SEARCH_COEFFICIENTS = (0.01, 0.001)
SEARCH_DELAYS = (0, 5000, 10000, 15000, 20000)


def merge_config(base: dict, overrides: dict) -> dict:
    """Merge nested config dicts, values of ``overrides`` win."""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_preset(raw: dict) -> dict:
    """Fill a raw run config with the values of the preset it names.

    The preset fills the defaults of every section; values set in the config win over both.

    Raises
    ------
    TrainingError
        If the preset is unknown
    """
    name = raw.get("preset")
    if name is None:
        return raw
    if name not in PRESETS:
        raise TrainingError(f"Unknown preset {name}, expected one of {sorted(PRESETS)}")
    return merge_config(merge_config(RunConfig().dict(), PRESETS[name]), raw)


def sample_search_config(rng: np.random.Generator) -> dict:
    """Draw one point of the hyperparameter search space as config overrides."""
    variant = rng.choice([v.value for v in ReguVariant if v != ReguVariant.NONE])
    return {
        "architecture": {
            "weight_mode": str(rng.choice(["positive", "dual"])),
            "bias_mode": str(rng.choice([m.value for m in BiasMode])),
            "last_activation": str(rng.choice(["tanh", "softmax"])),
        },
        "regu": {
            "variant": str(variant),
            "c": float(rng.choice(SEARCH_COEFFICIENTS)),
            "delay_batches": int(rng.choice(SEARCH_DELAYS)),
        },
        "train": {"learning_rate": float(10 ** rng.uniform(-3.0, -1.0))},
    }
