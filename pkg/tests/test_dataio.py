import math

import numpy as np
import pytest
from bimonn import dataio
from bimonn.binarize import binarize_network
from bimonn.constants import BiasMode, LayerKind, Task, WeightMode
from bimonn.dataio import (
    MNIST_FILES,
    DataIOError,
    GeometryError,
    IdxFormatError,
    ModelFormatError,
    accuracy,
    binarize_mnist,
    dice,
    expert_denoise,
    gen_sticks,
    gen_toy,
    generate_dataset,
    load_manifest,
    load_mnist,
    load_model,
    load_pbm_dataset,
    load_pipeline,
    mean_constant_distance,
    mean_dice,
    mnist_inputs,
    pairs_to_arrays,
    read_idx,
    save_model,
    save_pipeline,
    write_idx,
    write_pbm_dataset,
)
from bimonn.layers import BimonnModel
from bimonn.mdl.model_doc import TrainingDigest
from bimonn.mdl.settings import (
    ArchitectureConfig,
    DataConfig,
    LayerSpec,
    LevelSetConfig,
    SticksConfig,
    ToyConfig,
)
from bimonn.morphology import StructuringElement, dilate
from scipy import ndimage


class TestSticks:
    """Test the noisy sticks generator"""

    @pytest.fixture(autouse=True)
    def setup(self):
        self.cfg = SticksConfig(seed=7)
        self.pairs = gen_sticks(self.cfg, 20)

    def test_deterministic(self):
        """Test that equal settings give equal images"""
        again = gen_sticks(self.cfg, 3)
        assert again == self.pairs[:3]
        other = gen_sticks(self.cfg.copy(update={"seed": 8}), 3)
        assert other != self.pairs[:3]

    def test_noise(self):
        """Test the flip rate of both phases and that flips are isolated"""
        salt, pepper, background, foreground = 0, 0, 0, 0
        for noisy, clean in self.pairs:
            x, y = noisy.to_array(), clean.to_array()
            flips = x ^ y
            neighbours = ndimage.convolve(
                flips.astype(int), np.ones((3, 3), dtype=int), mode="constant"
            )
            assert np.all(neighbours[flips] == 1)
            salt += int((flips & ~y).sum())
            pepper += int((flips & y).sum())
            background += int((~y).sum())
            foreground += int(y.sum())
        rate = self.cfg.noise_rate
        assert salt / background == pytest.approx(rate, abs=0.01)
        sigma = math.sqrt(rate * (1.0 - rate) / foreground)
        assert abs(pepper / foreground - rate) <= 3.0 * sigma

    @pytest.mark.parametrize("pepper_rate", [0.0, 0.12])
    def test_pepper_rate(self, pepper_rate):
        """Test an explicit foreground flip rate"""
        cfg = self.cfg.copy(update={"pepper_rate": pepper_rate})
        holes, foreground = 0, 0
        for noisy, clean in gen_sticks(cfg, 10):
            x, y = noisy.to_array(), clean.to_array()
            holes += int((y & ~x).sum())
            foreground += int(y.sum())
        if pepper_rate == 0.0:
            assert holes == 0
        else:
            assert holes / foreground == pytest.approx(pepper_rate, abs=0.03)

    def test_sticks_shape(self):
        """Test image size and segment count"""
        for _, clean in self.pairs:
            assert clean.shape == (70, 70)
            assert clean.count() >= self.cfg.min_length * self.cfg.width

    def test_expert_baseline(self):
        """Test that line openings recover the sticks from salt noise"""
        cfg = self.cfg.copy(update={"pepper_rate": 0.0})
        scores = [dice(expert_denoise(noisy), clean) for noisy, clean in gen_sticks(cfg, 20)]
        assert np.mean(scores) >= 0.95
        scores = [dice(expert_denoise(noisy), clean) for noisy, clean in self.pairs]
        assert np.mean(scores) > 0.75
        for _, clean in self.pairs:
            assert expert_denoise(clean) == clean

    def test_geometry(self):
        """Test that sticks must fit the image"""
        with pytest.raises(GeometryError):
            gen_sticks(SticksConfig(size=10), 1)
        with pytest.raises(GeometryError):
            gen_sticks(self.cfg, 0)

    def test_arrays(self):
        """Test stacking pairs for training"""
        inputs, targets = pairs_to_arrays(self.pairs)
        assert inputs.shape == targets.shape == (20, 1, 70, 70)
        assert inputs.dtype == np.float64
        with pytest.raises(DataIOError):
            pairs_to_arrays([])


class TestToy:
    """Test the structuring element recovery generator"""

    def test_targets(self):
        """Test that targets are dilations of the inputs"""
        cfg = ToyConfig(size=16, seed=3)
        se = StructuringElement.from_bits(cfg.se_bits, cfg.se_shape)
        for x, y in gen_toy(cfg, 5):
            assert y == dilate(x, se)

    def test_generate_dataset(self):
        """Test the train and validation split"""
        cfg = DataConfig(task=Task.TOY, toy=ToyConfig(size=8), n_train=4, n_val=2)
        splits = generate_dataset(cfg)
        assert len(splits["train"]) == 4
        assert len(splits["val"]) == 2
        with pytest.raises(DataIOError):
            generate_dataset(DataConfig(task=Task.MNIST))


class TestPbmDataset:
    """Test datasets written as PBM files"""

    @pytest.fixture(autouse=True)
    def setup(self, tmp_path):
        self.cfg = DataConfig(task=Task.TOY, toy=ToyConfig(size=8), n_train=3, n_val=2)
        self.splits = generate_dataset(self.cfg)
        self.dir = tmp_path / "data"
        self.manifest = write_pbm_dataset(self.splits, self.dir, self.cfg)

    def test_round_trip(self):
        """Test that the written pairs load back"""
        assert load_pbm_dataset(self.dir, "train") == self.splits["train"]
        assert load_pbm_dataset(self.dir, "val") == self.splits["val"]
        assert load_manifest(self.dir).splits == {"train": 3, "val": 2}
        assert len(self.manifest.files) == 2 * 5

    def test_checksum(self):
        """Test that modified files are detected"""
        path = self.dir / "train" / "inputs" / "00001.pbm"
        path.write_bytes(path.read_bytes() + b"\n")
        with pytest.raises(DataIOError):
            load_pbm_dataset(self.dir, "train")

    def test_missing(self, tmp_path):
        """Test missing splits and manifests"""
        with pytest.raises(DataIOError):
            load_pbm_dataset(self.dir, "test")
        with pytest.raises(DataIOError):
            load_pbm_dataset(tmp_path / "nowhere")


class TestIdx:
    """Test IDX files and MNIST loading"""

    @pytest.fixture(autouse=True)
    def setup(self, tmp_path):
        self.dir = tmp_path
        self.rng = np.random.default_rng(9)

    def write_mnist(self, n_train=6, n_test=4):
        for split, count in (("train", n_train), ("test", n_test)):
            images = self.rng.integers(0, 256, (count, 28, 28), dtype=np.uint8)
            labels = self.rng.integers(0, 10, count, dtype=np.uint8)
            write_idx(images, self.dir / MNIST_FILES[f"{split}_images"])
            write_idx(labels, self.dir / MNIST_FILES[f"{split}_labels"])

    def test_read_written(self):
        """Test reading an IDX file back"""
        values = self.rng.integers(0, 256, (2, 3, 4), dtype=np.uint8)
        write_idx(values, self.dir / "values.idx")
        np.testing.assert_array_equal(read_idx(self.dir / "values.idx"), values)

    @pytest.mark.parametrize(
        "data",
        [b"\x01\x00\x08\x01\x00\x00\x00\x01\x05", b"\x00\x00\x08\x01\x00\x00\x00\x02\x05", b""],
    )
    def test_malformed(self, data):
        """Test bad magic numbers and truncated bodies"""
        path = self.dir / "bad.idx"
        path.write_bytes(data)
        with pytest.raises(IdxFormatError):
            read_idx(path)

    def test_missing_file(self):
        """Test unreadable files"""
        with pytest.raises(IdxFormatError):
            read_idx(self.dir / "missing.idx")

    def test_threshold(self):
        """Test the 128 threshold"""
        images = np.array([[[127, 128], [0, 255]]], dtype=np.uint8)
        np.testing.assert_array_equal(binarize_mnist(images)[0].to_array(), [[0, 1], [0, 1]])

    def test_load_mnist(self):
        """Test loading the four files with a sample limit"""
        self.write_mnist()
        data = load_mnist(self.dir, limit=3)
        assert data["train"][0].shape == (3, 28, 28)
        assert data["test"][1].shape == (3,)

    def test_count_mismatch(self):
        """Test that images and labels must agree"""
        self.write_mnist()
        write_idx(np.zeros(5, dtype=np.uint8), self.dir / MNIST_FILES["test_labels"])
        with pytest.raises(IdxFormatError):
            load_mnist(self.dir)

    def test_level_sets(self):
        """Test level set inputs"""
        images = self.rng.integers(0, 256, (2, 28, 28), dtype=np.uint8)
        inputs = mnist_inputs(images, LevelSetConfig(thresholds=[64, 192]))
        assert inputs.shape == (2, 2, 28, 28)
        np.testing.assert_array_equal(inputs[:, 1], images >= 192)
        assert mnist_inputs(images).shape == (2, 1, 28, 28)


class TestMetrics:
    """Test scores"""

    def test_dice(self):
        """Test overlap values"""
        assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
        assert dice(np.array([1, 1, 0]), np.array([1, 0, 0])) == pytest.approx(2 / 3)
        with pytest.raises(DataIOError):
            dice(np.zeros(3), np.zeros(4))
        assert mean_dice(np.ones((2, 3)), np.ones((2, 3))) == 1.0

    def test_accuracy(self):
        """Test label agreement"""
        assert accuracy(np.array([1, 2, 3, 4]), np.array([1, 2, 0, 4])) == 0.75
        with pytest.raises(DataIOError):
            accuracy(np.array([1]), np.array([1, 2]))


class TestModelFiles:
    """Test model and pipeline documents"""

    @pytest.fixture(autouse=True)
    def setup(self, tmp_path):
        self.dir = tmp_path
        architecture = ArchitectureConfig(
            layers=[LayerSpec(kind=LayerKind.BISEL, in_channels=1, out_channels=1, kernel_size=3)],
            weight_mode=WeightMode.IDENTITY,
            bias_mode=BiasMode.IDENTITY,
        )
        self.model = BimonnModel(architecture)
        layer = self.model.layers[0]
        layer.set_neuron("bise", (0, 0), StructuringElement.cross(3).mask.astype(float), 0.5, 1.0)
        layer.set_neuron("lui", (0,), np.ones(1), 0.5, 1.0)

    def test_round_trip(self):
        """Test that a saved model loads with equal parameters"""
        path = self.dir / "model.json"
        save_model(self.model, path, training=TrainingDigest(iterations=3))
        loaded = load_model(path)
        for key, value in self.model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[key], value)
        assert loaded.architecture == self.model.architecture

    def test_checksum(self):
        """Test that edited parameters are detected"""
        path = self.dir / "model.json"
        document = save_model(self.model, path)
        document.params["layers.0.lui.beta"].values = [0.25]
        path.write_text(document.json())
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_unreadable(self):
        """Test missing and malformed documents"""
        with pytest.raises(ModelFormatError):
            load_model(self.dir / "missing.json")
        (self.dir / "bad.json").write_text('{"format": "something-else"}')
        with pytest.raises(ModelFormatError):
            load_model(self.dir / "bad.json")
        with pytest.raises(ModelFormatError):
            load_pipeline(self.dir / "bad.json")

    def test_pipeline_round_trip(self):
        """Test that a saved pipeline loads back"""
        pipeline = binarize_network(self.model)
        save_pipeline(pipeline, self.dir / "pipeline.json")
        assert load_pipeline(self.dir / "pipeline.json") == pipeline

    def test_constant_distance(self):
        """Test that constant kernels have no distance"""
        assert mean_constant_distance(self.model) == pytest.approx(0.0)
        params = self.model.parameters()
        params["layers.0.bise.omega"] = params["layers.0.bise.omega"] * np.linspace(0.5, 1.5, 9)
        self.model.set_parameters(params)
        assert mean_constant_distance(self.model) > 0.0

    def test_digest_is_stable(self):
        """Test the checksum of equal parameters"""
        params = self.model.parameters()
        assert dataio.params_digest(params) == dataio.params_digest(dict(reversed(params.items())))
