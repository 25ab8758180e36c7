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

"""Datasets, metrics and the files models and pipelines are stored in."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from bimonn import constants
from bimonn.binarize import BinarizationError, project_constant
from bimonn.constants import Operation, Task
from bimonn.layers import BimonnModel, level_set_decompose
from bimonn.mdl.model_doc import ModelDocument, ParamArray, TrainingDigest
from bimonn.mdl.pipeline import BinaryPipeline
from bimonn.mdl.settings import (
    DataConfig,
    InitConfig,
    LevelSetConfig,
    SticksConfig,
    ToyConfig,
)
from bimonn.morphology import (
    BitImage,
    MorphologyError,
    StructuringElement,
    dilate,
    erode,
    opening,
    pointwise,
    read_pbm,
    to_pbm_bytes,
)
from pydantic import BaseModel, ValidationError, validator

Pair = tuple[BitImage, BitImage]
PathLike = Union[str, Path]

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataIOError(Exception):
    """Exception raised for errors in datasets and stored files."""

    def __init__(self, message: str):
        """Initialize DataIOError class.

        Parameters
        ----------
        message : str
            Error message
        """
        self.message = message
        super().__init__(self.message)


class IdxFormatError(DataIOError):
    """Exception raised when an IDX file is malformed or truncated."""

    pass


class ModelFormatError(DataIOError):
    """Exception raised when a model or pipeline document cannot be loaded."""

    pass


class GeometryError(DataIOError):
    """Exception raised when generator settings cannot produce an image."""

    pass


####################################################################################################
# Synthetic datasets
####################################################################################################


def _segment(length: int, angle: int, width: int) -> list[tuple[int, int]]:
    """Pixel offsets of a stick starting at the origin."""
    directions = {0: (0, 1), 90: (1, 0), -45: (1, 1), 45: (-1, 1)}
    d_row, d_col = directions[angle]
    return [
        (d_row * step + extra_row, d_col * step + extra_col)
        for step in range(length)
        for extra_row in range(width)
        for extra_col in range(width)
    ]


def _check_geometry(cfg: SticksConfig) -> None:
    span = cfg.max_length + cfg.width - 1
    if span > cfg.size:
        raise GeometryError(
            f"Sticks of length {cfg.max_length} and width {cfg.width} do not fit a"
            f" {cfg.size}x{cfg.size} image"
        )


def _draw_sticks(cfg: SticksConfig, rng: np.random.Generator) -> np.ndarray:
    target = np.zeros((cfg.size, cfg.size), dtype=bool)
    for _ in range(int(rng.integers(cfg.min_segments, cfg.max_segments + 1))):
        angle = int(rng.choice(cfg.angles))
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        offsets = np.array(_segment(length, angle, cfg.width))
        low, high = offsets.min(axis=0), offsets.max(axis=0)
        row = int(rng.integers(-low[0], cfg.size - high[0]))
        col = int(rng.integers(-low[1], cfg.size - high[1]))
        target[offsets[:, 0] + row, offsets[:, 1] + col] = True
    return target


def _isolated_flips(
    candidates: np.ndarray, count: int, rng: np.random.Generator, blocked: np.ndarray
) -> np.ndarray:
    """Pick up to ``count`` of the candidate pixels with no two picks 8-adjacent.

    ``blocked`` is the padded occupancy shared by every phase and is updated in place.
    """
    width = candidates.shape[1]
    flips = np.zeros_like(candidates)
    placed = 0
    for flat in rng.permutation(np.flatnonzero(candidates)):
        if placed == count:
            break
        row, col = divmod(int(flat), width)
        if blocked[row + 1, col + 1]:
            continue
        flips[row, col] = True
        blocked[row : row + 3, col : col + 3] = True
        placed += 1
    if placed < count:
        logging.debug(f"Placed {placed} of {count} isolated noise pixels")
    return flips


def _noisy(target: np.ndarray, cfg: SticksConfig, rng: np.random.Generator) -> np.ndarray:
    height, width = target.shape
    blocked = np.zeros((height + 2, width + 2), dtype=bool)
    pepper_rate = cfg.noise_rate if cfg.pepper_rate is None else cfg.pepper_rate
    pepper = _isolated_flips(target, int(rng.binomial(target.sum(), pepper_rate)), rng, blocked)
    background = ~target
    salt = _isolated_flips(
        background, int(rng.binomial(background.sum(), cfg.noise_rate)), rng, blocked
    )
    return target ^ (salt | pepper)


def gen_sticks(cfg: SticksConfig, n: int) -> list[Pair]:
    """Generate noisy stick images and their clean targets.

    Parameters
    ----------
    cfg : SticksConfig
        Geometry, noise and seed
    n : int
        Number of pairs

    Returns
    -------
    list[Pair]
        (noisy input, clean target) pairs, identical for identical settings

    Raises
    ------
    GeometryError
        If the longest stick does not fit the image, or ``n`` is not positive
    """
    if n < 1:
        raise GeometryError(f"Need at least one sample, got {n}")
    _check_geometry(cfg)
    pairs = []
    for sample_seed in np.random.SeedSequence(cfg.seed).spawn(n):
        rng = np.random.default_rng(sample_seed)
        target = _draw_sticks(cfg, rng)
        pairs.append((BitImage.from_array(_noisy(target, cfg, rng)), BitImage.from_array(target)))
    return pairs


def gen_toy(cfg: ToyConfig, n: int) -> list[Pair]:
    """Generate random sparse images and their dilation or erosion by a fixed element."""
    if n < 1:
        raise GeometryError(f"Need at least one sample, got {n}")
    try:
        se = StructuringElement.from_bits(cfg.se_bits, cfg.se_shape)
    except MorphologyError as err:
        raise GeometryError(f"Invalid target structuring element: {err.message}") from err
    operate = dilate if cfg.operation == Operation.DILATION else erode
    pairs = []
    for sample_seed in np.random.SeedSequence(cfg.seed).spawn(n):
        rng = np.random.default_rng(sample_seed)
        image = BitImage.from_array(rng.random((cfg.size, cfg.size)) < cfg.density)
        pairs.append((image, operate(image, se)))
    return pairs


def expert_denoise(
    image: BitImage,
    angles: Sequence[int] = constants.STICK_ANGLES,
    length: int = constants.EXPERT_LINE_LENGTH,
) -> BitImage:
    """Union of openings by line segments, removes everything shorter than ``length``."""
    return pointwise(
        "union", [opening(image, StructuringElement.line(length, angle)) for angle in angles]
    )


def pairs_to_arrays(pairs: Sequence[Pair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack pairs into float (n, 1, height, width) inputs and targets."""
    if not pairs:
        raise DataIOError("Empty dataset")
    inputs = np.stack([x.to_array() for x, _ in pairs])[:, None].astype(np.float64)
    targets = np.stack([y.to_array() for _, y in pairs])[:, None].astype(np.float64)
    return inputs, targets


####################################################################################################
# PBM datasets
####################################################################################################


class DatasetManifest(BaseModel):
    """Description and checksums of a generated dataset."""

    format: str = constants.MANIFEST_FORMAT
    """Document type tag"""
    version: int = constants.MANIFEST_VERSION
    """Document version"""
    task: Task
    """Generator used"""
    seed: int
    """Seed of the generator"""
    config: dict
    """Generator settings"""
    splits: dict[str, int]
    """Number of pairs per split"""
    files: dict[str, str]
    """SHA-256 per file, keyed by path relative to the dataset directory"""

    @validator("version")
    def version_is_known(cls, v):
        """Validate the manifest version."""
        if v != constants.MANIFEST_VERSION:
            raise ValueError(f"Unsupported dataset manifest version {v}")
        return v


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def generate_dataset(cfg: DataConfig) -> dict[str, list[Pair]]:
    """Train and validation pairs of a synthetic task."""
    if cfg.task == Task.STICKS:
        generator, settings = gen_sticks, cfg.sticks
    elif cfg.task == Task.TOY:
        generator, settings = gen_toy, cfg.toy
    else:
        raise DataIOError(f"Task {cfg.task.value} is read from IDX files, not generated")
    pairs = generator(settings, cfg.n_train + cfg.n_val)
    return {"train": pairs[: cfg.n_train], "val": pairs[cfg.n_train :]}


def write_pbm_dataset(
    splits: dict[str, list[Pair]], out_dir: PathLike, cfg: DataConfig
) -> DatasetManifest:
    """Write pairs as PBM files under ``<split>/inputs`` and ``<split>/targets``.

    Returns
    -------
    DatasetManifest
        The manifest, also written to ``manifest.json``
    """
    out_dir = Path(out_dir)
    settings = cfg.sticks if cfg.task == Task.STICKS else cfg.toy
    files = {}
    for split, pairs in splits.items():
        for index, pair in enumerate(pairs):
            for folder, image in zip(("inputs", "targets"), pair):
                relative = f"{split}/{folder}/{index:05d}.pbm"
                data = to_pbm_bytes(image)
                path = out_dir / relative
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
                files[relative] = _sha256(data)
    manifest = DatasetManifest(
        task=cfg.task,
        seed=settings.seed,
        config=json.loads(settings.json()),
        splits={split: len(pairs) for split, pairs in splits.items()},
        files=files,
    )
    (out_dir / "manifest.json").write_text(manifest.json(indent=2))
    logging.info(f"Wrote {len(files)} images to {out_dir}")
    return manifest


def load_manifest(dataset_dir: PathLike) -> DatasetManifest:
    """Read ``manifest.json`` of a dataset directory."""
    path = Path(dataset_dir) / "manifest.json"
    try:
        return DatasetManifest.parse_file(path)
    except (OSError, ValidationError, ValueError) as err:
        raise DataIOError(f"Cannot read dataset manifest {path}: {err}") from err


def load_pbm_dataset(dataset_dir: PathLike, split: str = "train") -> list[Pair]:
    """Load one split of a dataset, verifying every checksum.

    Raises
    ------
    DataIOError
        If the split is missing or a file does not match its checksum
    """
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    if split not in manifest.splits:
        raise DataIOError(f"Dataset {dataset_dir} has no split {split}")
    pairs = []
    for index in range(manifest.splits[split]):
        images = []
        for folder in ("inputs", "targets"):
            relative = f"{split}/{folder}/{index:05d}.pbm"
            path = dataset_dir / relative
            try:
                data = path.read_bytes()
            except OSError as err:
                raise DataIOError(f"Cannot read {path}: {err}") from err
            if _sha256(data) != manifest.files.get(relative):
                raise DataIOError(f"Checksum mismatch for {relative}")
            images.append(read_pbm(path))
        pairs.append((images[0], images[1]))
    return pairs


####################################################################################################
# IDX and MNIST
####################################################################################################


def _parse_idx(data: bytes, source: str) -> np.ndarray:
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IdxFormatError(f"{source}: bad magic number")
    code, ndim = data[2], data[3]
    if code not in constants.IDX_DTYPES:
        raise IdxFormatError(f"{source}: unknown element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{source}: truncated header")
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    dtype = np.dtype(constants.IDX_DTYPES[code])
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise IdxFormatError(f"{source}: expected {expected} bytes for {dims}, got {len(data)}")
    values = np.frombuffer(data, dtype=dtype, offset=header).reshape(dims)
    return values.astype(dtype.newbyteorder("="))


def read_idx(path: PathLike) -> np.ndarray:
    """Read an IDX file.

    Parameters
    ----------
    path : PathLike
        File to read

    Returns
    -------
    np.ndarray
        Values with the shape stored in the header, native byte order

    Raises
    ------
    IdxFormatError
        If the file is missing, has a bad magic number or is truncated
    """
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise IdxFormatError(f"Cannot read {path}: {err}") from err
    return _parse_idx(data, str(path))


def write_idx(values: np.ndarray, path: PathLike) -> None:
    """Write an array as an IDX file, the element type follows the array dtype."""
    values = np.asarray(values)
    codes = {
        np.dtype(dtype).newbyteorder("="): code for code, dtype in constants.IDX_DTYPES.items()
    }
    code = codes.get(values.dtype)
    if code is None:
        raise IdxFormatError(f"No IDX element type for {values.dtype}")
    header = bytes([0, 0, code, values.ndim]) + np.array(values.shape, dtype=">u4").tobytes()
    body = values.astype(np.dtype(constants.IDX_DTYPES[code])).tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + body)


def threshold_images(images: np.ndarray, threshold: int = constants.MNIST_THRESHOLD) -> np.ndarray:
    """Boolean images, pixels at or above the threshold are foreground."""
    return np.asarray(images) >= threshold


def binarize_mnist(images: np.ndarray) -> list[BitImage]:
    """Threshold byte images at 128."""
    return [BitImage.from_array(image) for image in threshold_images(images)]


def mnist_inputs(images: np.ndarray, level_sets: Optional[LevelSetConfig] = None) -> np.ndarray:
    """Network inputs (n, channels, 28, 28), thresholded or split into level sets."""
    if level_sets is None:
        return threshold_images(images)[:, None].astype(np.float64)
    batch = np.asarray(images, dtype=np.float64)[:, None]
    return level_set_decompose(batch, level_sets).astype(np.float64)


def load_mnist(
    mnist_dir: PathLike, limit: Optional[int] = None
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Train and test (images, labels) of an MNIST directory.

    Raises
    ------
    IdxFormatError
        If a file is missing or malformed, or image and label counts differ
    """
    mnist_dir = Path(mnist_dir)
    result = {}
    for split in ("train", "test"):
        images = read_idx(mnist_dir / MNIST_FILES[f"{split}_images"])
        labels = read_idx(mnist_dir / MNIST_FILES[f"{split}_labels"])
        if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
            raise IdxFormatError(
                f"MNIST {split} images {images.shape} do not match labels {labels.shape}"
            )
        if limit is not None:
            images, labels = images[:limit], labels[:limit]
        result[split] = (images, labels)
    logging.info(
        f"Loaded MNIST: {len(result['train'][1])} train, {len(result['test'][1])} test samples"
    )
    return result


####################################################################################################
# Metrics
####################################################################################################


class Metrics(BaseModel):
    """Scores of a model or pipeline on a dataset."""

    dice: Optional[float] = None
    """Mean DICE over samples, for image tasks"""
    accuracy: Optional[float] = None
    """Fraction of correct labels, for classification"""
    activated_ratio: Optional[float] = None
    """Fraction of neurons that binarize exactly"""
    samples: int = 0
    """Number of samples scored"""


def _as_bool(image: Union[BitImage, np.ndarray]) -> np.ndarray:
    if isinstance(image, BitImage):
        return image.to_array()
    return np.asarray(image).astype(bool)


def dice(a: Union[BitImage, np.ndarray], b: Union[BitImage, np.ndarray]) -> float:
    """Overlap ``2|a & b| / (|a| + |b|)``, 1 when both images are empty.

    Raises
    ------
    DataIOError
        If the shapes differ
    """
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise DataIOError(f"DICE of images with shapes {a.shape} and {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def mean_dice(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean DICE over the first axis."""
    if len(predictions) == 0:
        raise DataIOError("DICE of an empty dataset")
    return float(np.mean([dice(p, t) for p, t in zip(predictions, targets)]))


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of matching labels."""
    predicted, labels = np.asarray(predicted).reshape(-1), np.asarray(labels).reshape(-1)
    if predicted.shape != labels.shape or labels.size == 0:
        raise DataIOError(f"Cannot score {predicted.size} predictions against {labels.size}")
    return float(np.mean(predicted == labels))


def mean_constant_distance(model: BimonnModel) -> float:
    """Mean over neurons of the squared distance of the weights to the constant set."""
    distances = []
    for view in model.neurons():
        weights = np.maximum(view.weights, 0.0)
        try:
            distances.append(project_constant(weights, view.bias).distance)
        except BinarizationError:
            distances.append(0.0)
    return float(np.mean(distances))


####################################################################################################
# Model and pipeline files
####################################################################################################


def params_digest(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over the raw parameters in key order."""
    digest = hashlib.sha256()
    for key in sorted(params):
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(params[key], dtype="<f8").tobytes())
    return digest.hexdigest()


def save_model(
    model: BimonnModel,
    path: PathLike,
    init: Optional[InitConfig] = None,
    training: Optional[TrainingDigest] = None,
) -> ModelDocument:
    """Write a model as a versioned JSON document."""
    params = model.parameters()
    training = training.copy() if training is not None else TrainingDigest()
    training.params_sha256 = params_digest(params)
    document = ModelDocument(
        architecture=model.architecture,
        init=init if init is not None else InitConfig(),
        dual_scale=model.dual_scale,
        params={
            key: ParamArray(shape=list(value.shape), values=value.reshape(-1).tolist())
            for key, value in params.items()
        },
        training=training,
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(document.json(indent=2))
    return document


def load_model_document(path: PathLike) -> ModelDocument:
    """Read and validate a model document.

    Raises
    ------
    ModelFormatError
        If the file is unreadable, malformed or of another version
    """
    try:
        return ModelDocument.parse_file(path)
    except (OSError, ValidationError, ValueError) as err:
        raise ModelFormatError(f"Cannot load model {path}: {err}") from err


def model_from_document(document: ModelDocument) -> BimonnModel:
    """Rebuild a model and check its parameters against the digest."""
    model = BimonnModel(document.architecture, document.dual_scale)
    expected = model.parameters()
    if set(document.params) != set(expected):
        raise ModelFormatError("Model parameters do not match the architecture")
    params = {}
    for key, array in document.params.items():
        if tuple(array.shape) != expected[key].shape:
            raise ModelFormatError(f"Parameter {key} has shape {array.shape}")
        params[key] = np.array(array.values, dtype=np.float64).reshape(array.shape)
    model.set_parameters(params)
    digest = document.training.params_sha256
    if digest and digest != params_digest(params):
        raise ModelFormatError("Model parameters do not match their checksum")
    return model


def load_model(path: PathLike) -> BimonnModel:
    """Read a model written by ``save_model``."""
    return model_from_document(load_model_document(path))


def save_pipeline(pipeline: BinaryPipeline, path: PathLike) -> None:
    """Write a binarized pipeline as JSON."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(pipeline.json(indent=2))


def load_pipeline(path: PathLike) -> BinaryPipeline:
    """Read a pipeline written by ``save_pipeline``.

    Raises
    ------
    ModelFormatError
        If the file is unreadable, malformed or of another version
    """
    try:
        return BinaryPipeline.parse_file(path)
    except (OSError, ValidationError, ValueError) as err:
        raise ModelFormatError(f"Cannot load pipeline {path}: {err}") from err
