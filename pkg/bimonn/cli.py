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

"""Command line interface.

Every command reads a YAML run config, applies ``--set key.path=value`` overrides, validates
the result and writes all artifacts under ``--out``.
"""

import argparse
import json
import logging
import logging.handlers
import os
import sys
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import yaml
from bimonn import constants, dataio
from bimonn.autodiff import AutodiffError
from bimonn.binarize import (
    BinarizationError,
    activated_ratio,
    binarize_network,
    describe_pipeline,
    exec_binary_batch,
)
from bimonn.constants import LossKind, Task
from bimonn.dataio import DataIOError, Metrics
from bimonn.inittrain import (
    TrainingError,
    apply_preset,
    estimate_input_mean,
    init_model,
    train,
)
from bimonn.layers import BimonnModel, LayerError
from bimonn.mdl.model_doc import TrainingDigest
from bimonn.mdl.pipeline import BinarizedNeuron, BinaryPipeline, PipelineLayer
from bimonn.mdl.settings import RunConfig
from bimonn.morphology import MorphologyError
from bimonn.qpsolve import QpError
from bimonn.regularize import RegularizationError
from pydantic import ValidationError

PACKAGE_ERRORS = (
    AutodiffError,
    MorphologyError,
    LayerError,
    TrainingError,
    QpError,
    BinarizationError,
    RegularizationError,
    DataIOError,
)


class RunConfigError(Exception):
    """Exception raised when a run config cannot be loaded or validated."""

    def __init__(self, message: str):
        """Initialize RunConfigError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


####################################################################################################
# Setup
####################################################################################################


def setup_logging(log_level: str, log_file: Optional[str] = None) -> None:
    """Configure the root logger.

    Parameters
    ----------
    log_level : str
        Name of the level, case insensitive
    log_file : Optional[str], optional
        Rotating log file, by default log to stderr

    Raises
    ------
    ValueError
        If invalid log level is provided
    """
    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"Invalid log level: {log_level}")

    handler: logging.Handler
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)
        handler = logging.handlers.RotatingFileHandler(
            filename=log_file,
            maxBytes=constants.LOG_FILE_SIZE,  # 1 MB
            backupCount=constants.LOG_FILE_COUNT,  # 3 files
        )
    else:
        handler = logging.StreamHandler(sys.stderr)
    logging.basicConfig(
        level=numeric_level,
        format="%(asctime)s %(levelname)-8s %(message)s",
        handlers=[handler],
        force=True,
    )


def apply_override(raw: dict, override: str) -> None:
    """Set ``key.path=value`` in a raw config, the value is parsed as YAML.

    Raises
    ------
    RunConfigError
        If the override has no ``=`` or walks into a non-mapping
    """
    key, sep, text = override.partition("=")
    if not sep or not key:
        raise RunConfigError(f"Override {override} is not of the form key.path=value")
    *parents, leaf = key.split(".")
    node = raw
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise RunConfigError(f"Override {override}: {part} is not a section")
        node = child
    try:
        node[leaf] = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise RunConfigError(f"Override {override}: cannot parse value") from err


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """Load, override and validate a run config.

    Parameters
    ----------
    path : Optional[str]
        YAML file, by default every setting keeps its default
    overrides : Sequence[str], optional
        ``key.path=value`` strings applied in order

    Returns
    -------
    RunConfig
        Validated settings

    Raises
    ------
    RunConfigError
        If the file is missing or malformed, or validation fails
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "r") as file:
                raw = yaml.safe_load(file) or {}
        except FileNotFoundError as err:
            raise RunConfigError(f"The config file {path} was not found.") from err
        except yaml.YAMLError as err:
            raise RunConfigError(f"There was an error parsing the config file {path}.") from err
        if not isinstance(raw, dict):
            raise RunConfigError(f"The config file {path} does not hold a mapping")
    for override in overrides:
        apply_override(raw, override)
    try:
        return RunConfig.parse_obj(apply_preset(raw))
    except TrainingError as err:
        raise RunConfigError(err.message) from err
    except ValidationError as err:
        raise RunConfigError(f"Invalid run config: {err}") from err


def echo_config(cfg: RunConfig, out: Path) -> None:
    """Write the effective config next to the artifacts."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as file:
        yaml.safe_dump(json.loads(cfg.json()), file, sort_keys=False)


####################################################################################################
# Data
####################################################################################################


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes)[np.asarray(labels, dtype=int)]


def load_split(cfg: RunConfig, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and targets of a split: ``train``, ``val`` or, for MNIST, ``test``.

    Image tasks read the dataset directory when one is configured and generate the pairs in
    memory otherwise. MNIST returns labels, as one-hot rows unless the loss is cross entropy.
    """
    data = cfg.data
    if data.task == Task.MNIST:
        if data.mnist_dir is None:
            raise DataIOError("The mnist task needs data.mnist_dir")
        splits = dataio.load_mnist(data.mnist_dir, data.mnist_limit)
        images, labels = splits["train" if split == "train" else "test"]
        inputs = dataio.mnist_inputs(images, data.level_sets)
        if cfg.train.loss == LossKind.CE_SOFTMAX:
            return inputs, labels.astype(np.int64)
        return inputs, _one_hot(labels, cfg.architecture.layers[-1].out_channels)
    split = "val" if split == "test" else split
    if data.dataset_dir is not None:
        pairs = dataio.load_pbm_dataset(data.dataset_dir, split)
    else:
        pairs = dataio.generate_dataset(data)[split]
    return dataio.pairs_to_arrays(pairs)


def _labels(targets: np.ndarray) -> np.ndarray:
    return targets if targets.ndim == 1 else targets.argmax(axis=1)


def score(
    cfg: RunConfig, outputs: np.ndarray, targets: np.ndarray, is_binary: bool = False
) -> Metrics:
    """DICE for image tasks, accuracy for classification."""
    if len(outputs) == 0:
        raise DataIOError("Cannot score an empty dataset")
    if cfg.data.task == Task.MNIST:
        predicted = np.asarray(outputs, dtype=np.float64).argmax(axis=1)
        return Metrics(accuracy=dataio.accuracy(predicted, _labels(targets)), samples=len(outputs))
    predicted = outputs if is_binary else outputs > 0.5
    return Metrics(dice=dataio.mean_dice(predicted, targets > 0.5), samples=len(outputs))


def evaluate_model(cfg: RunConfig, model: BimonnModel, inputs, targets) -> Metrics:
    """Score a real valued model."""
    return score(cfg, model.predict(inputs), targets)


def evaluate_pipeline(cfg: RunConfig, pipeline: BinaryPipeline, inputs, targets) -> Metrics:
    """Score a binarized pipeline on thresholded inputs."""
    outputs = exec_binary_batch(pipeline, np.asarray(inputs) > 0.5)
    return score(cfg, outputs, targets, is_binary=pipeline.float_head is None)


def _write_json(document: Union[dict, Metrics], path: Path) -> None:
    if isinstance(document, Metrics):
        path.write_text(document.json(indent=2))
    else:
        path.write_text(json.dumps(document, indent=2))


####################################################################################################
# Commands
####################################################################################################


def cmd_gen_data(cfg: RunConfig, out: Path) -> dataio.DatasetManifest:
    """Generate a synthetic dataset with its manifest under ``out``."""
    splits = dataio.generate_dataset(cfg.data)
    logging.info("Generated dataset..           [OK]")
    return dataio.write_pbm_dataset(splits, out, cfg.data)


def cmd_train(cfg: RunConfig, out: Path) -> Metrics:
    """Initialize and train a model, write ``model.json``, ``metrics.csv`` and ``summary.json``."""
    inputs, targets = load_split(cfg, "train")
    logging.info(f"Loaded {len(inputs)} training samples..  [OK]")
    model = BimonnModel(cfg.architecture)
    init = cfg.init
    if init.input_mean is None:
        init = init.copy(update={"input_mean": estimate_input_mean(inputs[: cfg.train.batch_size])})
    init_model(model, init, np.random.default_rng(cfg.train.seed))
    model.log_summary()

    result = train(model, inputs, targets, cfg.train, cfg.regu, out / "metrics.csv")
    logging.info(f"Trained {result.iterations} iterations ({result.stop_reason})..  [OK]")
    for warning in sorted(set(result.warnings)):
        logging.warning(warning)
    digest = TrainingDigest(
        iterations=result.iterations,
        final_learning_rate=result.final_learning_rate,
        stop_reason=result.stop_reason,
    )
    dataio.save_model(model, out / "model.json", init, digest)

    val_inputs, val_targets = load_split(cfg, "val")
    metrics = evaluate_model(cfg, model, val_inputs, val_targets)
    metrics.activated_ratio = activated_ratio(model).ratio
    _write_json(metrics, out / "summary.json")
    logging.info(
        f"Summary: dice={metrics.dice} accuracy={metrics.accuracy}"
        f" activated_ratio={metrics.activated_ratio:.3f}"
    )
    return metrics


def cmd_binarize(cfg: RunConfig, model_path: Path, out: Path) -> dict:
    """Binarize a stored model, write the pipeline, its structure and a fidelity report."""
    model = dataio.load_model(model_path)
    logging.info("Loaded model..                [OK]")
    settings = cfg.binarize
    pipeline = binarize_network(
        model, settings.strategy, settings.skip_last, settings.activable_cap
    )
    dataio.save_pipeline(pipeline, out / "pipeline.json")
    (out / "pipeline.txt").write_text(describe_pipeline(pipeline))
    logging.info("Binarized model..             [OK]")

    chain, fixed = activated_ratio(model, chain=True), activated_ratio(model, chain=False)
    inputs, targets = load_split(cfg, "val")
    real = evaluate_model(cfg, model, inputs, targets)
    binary = evaluate_pipeline(cfg, pipeline, inputs, targets)
    delta = {
        name: getattr(binary, name) - getattr(real, name)
        for name in ("dice", "accuracy")
        if getattr(real, name) is not None
    }
    neurons = [
        {"layer": index, "group": group, "index": position, **neuron.dict(exclude={"se_bits"})}
        for index, layer in enumerate(pipeline.layers)
        for group, position, neuron in _labelled(layer)
    ]
    report = {
        "float": json.loads(real.json()),
        "binary": json.loads(binary.json()),
        "delta": delta,
        "activated": {"chain": json.loads(chain.json()), "fixed": json.loads(fixed.json())},
        "neurons": neurons,
        "warnings": pipeline.warnings,
    }
    _write_json(report, out / "report.json")
    logging.info(
        f"Binarized metrics {json.loads(binary.json())}, activated ratio {chain.ratio:.3f}"
    )
    return report


def _labelled(layer: PipelineLayer) -> list[tuple[str, list[int], BinarizedNeuron]]:
    rows = []
    for n, row in enumerate(layer.bises or []):
        rows.extend(("bise", [n, k], neuron) for k, neuron in enumerate(row))
    rows.extend(("lui", [k], neuron) for k, neuron in enumerate(layer.luis))
    return rows


def cmd_eval(
    cfg: RunConfig, out: Path, model_path: Optional[Path], pipeline_path: Optional[Path]
) -> Metrics:
    """Score a model or pipeline on the validation or test split, write ``eval.json``."""
    inputs, targets = load_split(cfg, "test")
    if len(inputs) == 0:
        raise DataIOError("Cannot evaluate on an empty dataset")
    if pipeline_path is not None:
        metrics = evaluate_pipeline(cfg, dataio.load_pipeline(pipeline_path), inputs, targets)
    elif model_path is not None:
        metrics = evaluate_model(cfg, dataio.load_model(model_path), inputs, targets)
    else:
        raise RunConfigError("eval needs --model or --pipeline")
    _write_json(metrics, out / "eval.json")
    print(metrics.json())
    return metrics


####################################################################################################
# Entry point
####################################################################################################


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per command."""
    parser = argparse.ArgumentParser(
        prog="bimonn", description="Train and binarize morphological neural networks"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. train.learning_rate=0.05",
    )
    common.add_argument("--out", required=True, help="directory for every artifact")
    common.add_argument("--log-level", default=os.getenv("LOG_LEVEL", "INFO"))
    common.add_argument("--log-file", default=os.getenv("LOG_FILE"))

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    commands.add_parser("train", parents=[common], help="train a model")
    binarize = commands.add_parser("binarize", parents=[common], help="binarize a model")
    binarize.add_argument("--model", required=True, help="model.json written by train")
    evaluate = commands.add_parser("eval", parents=[common], help="score a model or pipeline")
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", help="model.json written by train")
    source.add_argument("--pipeline", help="pipeline.json written by binarize")
    return parser


def run(args: argparse.Namespace) -> None:
    """Execute a parsed command."""
    cfg = load_run_config(args.config, args.overrides)
    logging.info("Loaded run config..           [OK]")
    out = Path(args.out)
    echo_config(cfg, out)
    if args.command == "gen-data":
        cmd_gen_data(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, out)
    elif args.command == "binarize":
        cmd_binarize(cfg, Path(args.model), out)
    else:
        model = Path(args.model) if args.model else None
        pipeline = Path(args.pipeline) if args.pipeline else None
        cmd_eval(cfg, out, model, pipeline)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the application, returns the exit status."""
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level, args.log_file)
    except ValueError as err:
        print(json.dumps({"error": "ValueError", "message": str(err)}), file=sys.stderr)
        return constants.STATUS_ERR
    try:
        run(args)
    except (RunConfigError, OSError) + PACKAGE_ERRORS as err:
        message = getattr(err, "message", str(err))
        logging.critical(f"{type(err).__name__}: {message}")
        print(json.dumps({"error": type(err).__name__, "message": message}), file=sys.stderr)
        return constants.STATUS_ERR
    return constants.STATUS_OK
