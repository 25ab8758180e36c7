import json
import os
from pathlib import Path

import pytest
import yaml
from bimonn import cli, dataio
from bimonn.cli import RunConfigError, apply_override, echo_config, load_run_config, main
from bimonn.constants import (
    STATUS_ERR,
    STATUS_OK,
    LastActivation,
    LossKind,
    ReguVariant,
    Task,
    WeightMode,
)
from bimonn.dataio import MNIST_FILES
from bimonn.inittrain import TrainingError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TOY_CONFIG = {
    "seed": 1,
    "data": {"task": "toy", "toy": {"size": 10, "density": 0.15}, "n_train": 16, "n_val": 4},
    "architecture": {
        "layers": [{"kind": "bisel", "in_channels": 1, "out_channels": 1, "kernel_size": 3}],
        "weight_mode": "positive",
        "bias_mode": "positive",
    },
    "train": {"learning_rate": 0.05, "batch_size": 4, "max_iterations": 30},
}


def last_json_line(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


class TestRunConfig:
    """Test loading and overriding run configs"""

    @pytest.fixture(autouse=True)
    def setup(self, tmp_path):
        self.path = tmp_path / "run.yaml"
        self.path.write_text(yaml.safe_dump(TOY_CONFIG))

    def test_load(self):
        """Test a config file with overrides"""
        cfg = load_run_config(str(self.path), ["train.learning_rate=0.01", "regu.c=0.5"])
        assert cfg.data.task == Task.TOY
        assert cfg.train.learning_rate == 0.01
        assert cfg.regu.c == 0.5
        assert cfg.train.batch_size == 4

    def test_defaults(self):
        """Test that every setting has a default"""
        cfg = load_run_config(None)
        assert cfg.data.task == Task.STICKS
        assert cfg.architecture.weight_mode == WeightMode.DUAL

    def test_preset(self):
        """Test that presets fill the sections the file leaves unset"""
        cfg = load_run_config(None, ["preset=unif", "train.loss=mse"])
        assert cfg.regu.c == 0.01
        assert cfg.train.loss == LossKind.MSE

    def test_apply_override(self):
        """Test nested keys and YAML values"""
        raw = {"train": {"seed": 1}}
        apply_override(raw, "train.epochs=3")
        apply_override(raw, "data.level_sets.thresholds=[0.2, 0.6]")
        assert raw["train"] == {"seed": 1, "epochs": 3}
        assert raw["data"] == {"level_sets": {"thresholds": [0.2, 0.6]}}

    @pytest.mark.parametrize("override", ["no_equals", "=3", "seed.inner=1", "train.lr=[1"])
    def test_bad_override(self, override):
        """Test malformed overrides"""
        with pytest.raises(RunConfigError):
            load_run_config(str(self.path), [override])

    @pytest.mark.parametrize(
        "override", ["train.unknown=1", "train.learning_rate=-1", "preset=fancy"]
    )
    def test_invalid_values(self, override):
        """Test that validation errors become config errors"""
        with pytest.raises(RunConfigError):
            load_run_config(str(self.path), [override])

    def test_bad_files(self, tmp_path):
        """Test missing, malformed and non-mapping files"""
        with pytest.raises(RunConfigError):
            load_run_config(str(tmp_path / "missing.yaml"))
        bad = tmp_path / "bad.yaml"
        bad.write_text("train: [1, 2")
        with pytest.raises(RunConfigError):
            load_run_config(str(bad))
        bad.write_text("- 1\n- 2\n")
        with pytest.raises(RunConfigError):
            load_run_config(str(bad))

    @pytest.mark.parametrize("name", ["sticks", "toy", "mnist", "mnist_unif"])
    def test_shipped_configs(self, name):
        """Test that every shipped config validates"""
        cfg = load_run_config(str(CONFIGS / f"{name}.yaml"))
        assert cfg.architecture.layers

    def test_mnist_unif_config(self):
        """Test the dense MNIST classifier settings"""
        cfg = load_run_config(str(CONFIGS / "mnist_unif.yaml"))
        widths = [(layer.in_channels, layer.out_channels) for layer in cfg.architecture.layers]
        assert widths == [(784, 512), (512, 10)]
        assert cfg.architecture.weight_mode == WeightMode.POSITIVE
        assert cfg.architecture.last_activation == LastActivation.SOFTMAX
        assert cfg.regu.variant == ReguVariant.UNIF
        assert (cfg.regu.c, cfg.regu.delay_batches) == (0.01, 10000)
        assert cfg.train.epochs <= 5
        assert cfg.train.loss == LossKind.CE_SOFTMAX
        assert cfg.data.level_sets is None
        assert not cfg.binarize.skip_last
        assert cfg.data.sticks.pepper_rate is None


class TestMain:
    """Test the command line entry point"""

    @pytest.fixture(autouse=True)
    def setup(self, tmp_path):
        self.dir = tmp_path
        self.config = tmp_path / "run.yaml"
        self.config.write_text(yaml.safe_dump(TOY_CONFIG))
        self.log = tmp_path / "logs" / "bimonn.log"

    def invoke(self, command, out, *extra):
        argv = [command, "--config", str(self.config), "--out", str(self.dir / out)]
        return main(argv + ["--log-file", str(self.log), *extra])

    def test_gen_data(self):
        """Test that gen-data writes a dataset and the effective config"""
        assert self.invoke("gen-data", "data") == STATUS_OK
        manifest = json.loads((self.dir / "data" / "manifest.json").read_text())
        assert manifest["splits"] == {"train": 16, "val": 4}
        assert (self.dir / "data" / "config.yaml").exists()
        assert self.log.exists()

    def test_train_binarize_eval(self, capsys):
        """Test the whole flow on a small toy task"""
        assert self.invoke("train", "train") == STATUS_OK
        for name in ("model.json", "metrics.csv", "summary.json"):
            assert (self.dir / "train" / name).exists()
        summary = json.loads((self.dir / "train" / "summary.json").read_text())
        assert 0.0 <= summary["dice"] <= 1.0
        assert summary["samples"] == 4

        model = str(self.dir / "train" / "model.json")
        assert self.invoke("binarize", "bin", "--model", model) == STATUS_OK
        report = json.loads((self.dir / "bin" / "report.json").read_text())
        assert set(report) >= {"float", "binary", "delta", "activated", "neurons"}
        assert len(report["neurons"]) == 2
        assert (self.dir / "bin" / "pipeline.txt").read_text().startswith("layer 0 bisel")

        capsys.readouterr()
        pipeline = str(self.dir / "bin" / "pipeline.json")
        assert self.invoke("eval", "eval", "--pipeline", pipeline) == STATUS_OK
        printed = last_json_line(capsys.readouterr().out)
        assert printed["dice"] == pytest.approx(report["binary"]["dice"])
        assert self.invoke("eval", "eval_float", "--model", model) == STATUS_OK

    def test_trained_from_dataset(self):
        """Test training on a generated dataset directory"""
        assert self.invoke("gen-data", "data") == STATUS_OK
        dataset = f"data.dataset_dir={self.dir / 'data'}"
        assert self.invoke("train", "train", "--set", dataset) == STATUS_OK

    def test_config_error(self, capsys):
        """Test that config errors exit with a JSON message"""
        status = self.invoke("train", "train", "--set", "train.batch_size=0")
        assert status == STATUS_ERR
        error = last_json_line(capsys.readouterr().err)
        assert error["error"] == "RunConfigError"

    def test_package_error(self, mocker, capsys):
        """Test that package errors exit with a JSON message"""
        mocker.patch.object(cli, "cmd_train", side_effect=TrainingError("diverged"))
        assert self.invoke("train", "train") == STATUS_ERR
        assert last_json_line(capsys.readouterr().err) == {
            "error": "TrainingError",
            "message": "diverged",
        }

    def test_missing_model(self, capsys):
        """Test that a missing model file is reported"""
        status = self.invoke("binarize", "bin", "--model", str(self.dir / "missing.json"))
        assert status == STATUS_ERR
        assert last_json_line(capsys.readouterr().err)["error"] == "ModelFormatError"

    def test_invalid_log_level(self, capsys):
        """Test log level validation"""
        assert self.invoke("gen-data", "data", "--log-level", "chatty") == STATUS_ERR
        assert last_json_line(capsys.readouterr().err)["error"] == "ValueError"

    def test_usage_errors(self):
        """Test argument validation"""
        with pytest.raises(SystemExit):
            main(["train"])
        with pytest.raises(SystemExit):
            main(["eval", "--out", str(self.dir)])


@pytest.mark.slow
class TestEndToEnd:
    """Test full training runs against their target scores"""

    @pytest.fixture(autouse=True)
    def setup(self, tmp_path):
        self.dir = tmp_path

    def run(self, cfg, name):
        out = self.dir / name
        echo_config(cfg, out)
        summary = cli.cmd_train(cfg, out)
        report = cli.cmd_binarize(cfg, out / "model.json", out)
        return summary, report

    def test_sticks_denoising(self):
        """Test that a trained denoiser stays accurate once binarized"""
        scores = []
        for seed in range(3):
            overrides = [f"seed={seed}", f"train.seed={seed}", f"data.sticks.seed={seed}"]
            cfg = load_run_config(str(CONFIGS / "sticks.yaml"), overrides)
            summary, report = self.run(cfg, f"sticks_{seed}")
            scores.append((summary.dice, report["binary"]["dice"]))
            if summary.dice >= 0.95 and report["binary"]["dice"] >= 0.90:
                return
        pytest.fail(f"No seeded attempt reached the target scores: {scores}")

    def test_regularization_effect(self):
        """Test that the unif loss brings weights closer to the constant set"""
        distances = {}
        for variant in ("none", "unif"):
            cfg = load_run_config(
                str(CONFIGS / "toy.yaml"),
                [f"regu.variant={variant}", "regu.c=0.01", "regu.delay_batches=0"],
            )
            self.run(cfg, variant)
            model = dataio.load_model(self.dir / variant / "model.json")
            distances[variant] = dataio.mean_constant_distance(model)
        assert distances["unif"] <= 0.7 * distances["none"]

    def test_mnist(self):
        """Test a regularized dense classifier on MNIST against an unconstrained one"""
        mnist_dir = os.getenv("MNIST_DIR")
        if mnist_dir is None or not (Path(mnist_dir) / MNIST_FILES["train_images"]).exists():
            pytest.skip("MNIST_DIR does not point at the MNIST IDX files")
        config = str(CONFIGS / "mnist_unif.yaml")
        cfg = load_run_config(config, [f"data.mnist_dir={mnist_dir}"])
        summary, report = self.run(cfg, "mnist")
        assert summary.accuracy >= 0.90
        binary = report["binary"]["accuracy"]
        assert binary >= max(summary.accuracy - 0.20, 0.50)
        overrides = [
            f"data.mnist_dir={mnist_dir}",
            "architecture.weight_mode=identity",
            "architecture.bias_mode=identity",
            "regu.variant=none",
        ]
        _, report = self.run(load_run_config(config, overrides), "mnist_baseline")
        assert report["binary"]["accuracy"] <= 0.20
