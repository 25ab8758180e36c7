import csv
import math

import numpy as np
import pytest
from bimonn.autodiff import Tensor
from bimonn.constants import (
    DUAL_SCALE,
    BiasMode,
    LayerKind,
    LossKind,
    Operation,
    ReguVariant,
    ScheduleAction,
    WeightMode,
)
from bimonn.dataio import gen_toy, pairs_to_arrays
from bimonn.inittrain import (
    AdamState,
    InitializationError,
    ScheduleState,
    TrainingDivergedError,
    TrainingError,
    adam_step,
    apply_preset,
    estimate_input_mean,
    init_bise,
    init_group,
    init_model,
    init_statistics,
    loss_value,
    lr_schedule,
    merge_config,
    sample_search_config,
    train,
)
from bimonn.layers import BimonnModel, bise_stage, effective_weights, xi
from bimonn.mdl.settings import (
    ArchitectureConfig,
    InitConfig,
    LayerSpec,
    ReguConfig,
    RunConfig,
    ToyConfig,
    TrainConfig,
)
from scipy import stats


def small_model(weight_mode=WeightMode.POSITIVE, bias_mode=BiasMode.POSITIVE) -> BimonnModel:
    architecture = ArchitectureConfig(
        layers=[LayerSpec(kind=LayerKind.BISEL, in_channels=1, out_channels=2, kernel_size=3)],
        weight_mode=weight_mode,
        bias_mode=bias_mode,
    )
    return BimonnModel(architecture)


class TestInitialization:
    """Test weight and bias initialization"""

    @pytest.fixture(autouse=True)
    def setup(self):
        self.rng = np.random.default_rng(31)
        self.cfg = InitConfig()

    def test_statistics(self):
        """Test the distribution of a 5x5 kernel"""
        result = init_statistics(25)
        assert result.p_prime == pytest.approx(1.58434, rel=1e-4)
        assert result.mu == pytest.approx(0.117787, rel=1e-4)
        assert result.sigma == pytest.approx(0.0020645, rel=1e-3)
        low, high = result.support
        assert low > 0
        assert (low + high) / 2 == pytest.approx(result.mu)

    def test_empty_kernel(self):
        """Test kernel size validation"""
        with pytest.raises(InitializationError):
            init_statistics(0)

    def test_uniform_weights(self):
        """Test that weights follow the uniform distribution"""
        omega, _, p = init_group(
            (4000,), 25, self.cfg, self.rng, WeightMode.IDENTITY, BiasMode.IDENTITY
        )
        low, high = init_statistics(25).support
        result = stats.kstest(omega.reshape(-1), "uniform", args=(low, high - low))
        assert result.pvalue > 0.01
        assert np.all(p == 0)

    def test_biases(self):
        """Test biases around half the weight sum, the input mean for the first stage"""
        cfg = InitConfig(eps_bias=0.0, input_mean=0.2)
        omega, beta, _ = init_group(
            (10,), 9, cfg, self.rng, WeightMode.IDENTITY, BiasMode.IDENTITY
        )
        np.testing.assert_allclose(beta, 0.5 * omega.sum(axis=-1))
        omega, beta, _ = init_group(
            (10,), 9, cfg, self.rng, WeightMode.IDENTITY, BiasMode.IDENTITY, first_stage=True
        )
        np.testing.assert_allclose(beta, 0.2 * omega.sum(axis=-1))

    def test_bias_noise(self):
        """Test that the bias noise stays within its width"""
        cfg = InitConfig(eps_bias=1e-3)
        omega, beta, _ = init_group(
            (500,), 9, cfg, self.rng, WeightMode.IDENTITY, BiasMode.IDENTITY
        )
        noise = beta - 0.5 * omega.sum(axis=-1)
        assert np.all(np.abs(noise) <= 1e-3)
        assert np.std(noise) > 0

    def test_dual_model(self):
        """Test that dual mode neurons start with their weight sum fixed"""
        model = small_model(WeightMode.DUAL, BiasMode.POSITIVE)
        init_model(model, InitConfig(eps_bias=0.0), self.rng)
        for view in model.neurons():
            assert view.weights.sum() == pytest.approx(DUAL_SCALE)
            assert view.bias == pytest.approx(0.5 * DUAL_SCALE, rel=1e-6)
            assert view.p == 0.0

    def test_zero_scaling_outputs_half(self):
        """Test that a freshly initialized model outputs one half"""
        model = small_model()
        init_model(model, self.cfg, self.rng)
        out = model.predict(self.rng.random((2, 1, 6, 6)))
        np.testing.assert_allclose(out, 0.5)

    def test_init_bise(self):
        """Test a single neuron"""
        params = init_bise(0, (3, 3), self.cfg, self.rng)
        assert params.omega.shape == (3, 3)
        assert params.p == 0.0

    def test_input_mean(self):
        """Test the batch mean estimate"""
        assert estimate_input_mean(np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.5
        with pytest.raises(TrainingError):
            estimate_input_mean(np.zeros((0, 3)))

    def test_stacked_statistics(self):
        """Test centred pre-activations and outputs through three 11x11 neurons"""
        cfg = InitConfig(eps_bias=0.0)
        scaling = init_statistics(121, cfg.h).p_prime
        binary = (self.rng.random((8, 64, 64)) < 0.5).astype(float)
        x = np.concatenate([binary, 1.0 - binary])
        for index in range(3):
            params = init_bise(
                index, (11, 11), cfg, self.rng, WeightMode.IDENTITY, BiasMode.IDENTITY
            )
            weights = params.omega
            pre = bise_stage(
                Tensor(x[:, None]),
                Tensor(weights[None, None]),
                Tensor(np.full((1, 1), params.beta)),
                Tensor(np.full((1, 1), scaling)),
                activate=False,
            ).value[:, 0, 0]
            x = xi(pre)
            border = 5 * (index + 1)
            interior = pre[:, border:-border, border:-border]
            assert interior.size >= 10**4
            assert abs(interior.mean()) <= 0.02
            assert abs(x[:, border:-border, border:-border].mean() - 0.5) <= 0.02

    def test_dual_distribution(self):
        """Test that normalized dual weights follow the uniform initialization"""
        omega, _, _ = init_group(
            (), 10**4, self.cfg, self.rng, WeightMode.DUAL, BiasMode.IDENTITY
        )
        weights = effective_weights(omega, WeightMode.DUAL).value
        low, high = init_statistics(10**4, self.cfg.h).support
        result = stats.kstest(weights, "uniform", args=(low, high - low))
        assert result.statistic <= 0.02

    def test_dual_bias_follows_effective_weights(self):
        """Test that dual biases are half the effective weight sum"""
        omega, beta, _ = init_group(
            (6,), 9, InitConfig(eps_bias=0.0), self.rng, WeightMode.DUAL, BiasMode.IDENTITY
        )
        weights = effective_weights(omega, WeightMode.DUAL).value
        np.testing.assert_allclose(weights.sum(axis=-1), DUAL_SCALE)
        np.testing.assert_allclose(beta, 0.5 * weights.sum(axis=-1))

class TestOptimizer:
    """Test Adam, losses and the learning rate schedule"""

    def test_adam_first_step(self):
        """Test the bias corrected first step"""
        state = AdamState()
        updated = adam_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, state, 0.1)
        assert updated["w"][0] == pytest.approx(0.9)
        assert state.step == 1

    def test_adam_errors(self):
        """Test non-finite and misshapen gradients"""
        with pytest.raises(TrainingDivergedError) as err:
            adam_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, AdamState(), 0.1)
        assert err.value.iteration == 1
        with pytest.raises(TrainingError):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), 0.1)

    def test_losses(self):
        """Test the data loss values"""
        half = Tensor(np.full((1, 10), 0.5))
        assert loss_value(LossKind.BCE, half, np.ones((1, 10))).item() == pytest.approx(
            10 * math.log(2)
        )
        logits = Tensor(np.zeros((1, 10)))
        assert loss_value(LossKind.CE_SOFTMAX, logits, np.array([3])).item() == pytest.approx(
            math.log(10)
        )
        prediction = Tensor(np.array([[1.0, 2.0]]))
        assert loss_value(LossKind.MSE, prediction, np.zeros((1, 2))).item() == pytest.approx(2.5)

    def test_cross_entropy_one_hot(self):
        """Test that one-hot targets match integer labels"""
        logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]))
        labels = loss_value(LossKind.CE_SOFTMAX, logits, np.array([1, 2])).item()
        one_hot = loss_value(LossKind.CE_SOFTMAX, logits, np.eye(3)[[1, 2]]).item()
        assert labels == pytest.approx(one_hot)

    def test_schedule(self):
        """Test halving and stopping on a flat loss"""
        state = ScheduleState()
        history = []
        actions = []
        for _ in range(7):
            history.append(1.0)
            actions.append(lr_schedule(history, state, 3, 6, 1))
        keep, halve, stop = ScheduleAction.KEEP, ScheduleAction.HALVE, ScheduleAction.STOP
        assert actions == [keep, keep, keep, halve, keep, keep, stop]

    def test_schedule_improvement_resets(self):
        """Test that an improvement resets the counters"""
        state = ScheduleState()
        for value in [1.0, 1.0, 1.0, 0.5]:
            action = lr_schedule([value], state, 3, 6, 1)
        assert action == ScheduleAction.KEEP
        assert state.best == 0.5
        assert state.since_best == 0


class TestTrain:
    """Test the training loop"""

    @pytest.fixture(autouse=True)
    def setup(self):
        toy = ToyConfig(size=12, density=0.2, operation=Operation.DILATION, seed=4)
        self.inputs, self.targets = pairs_to_arrays(gen_toy(toy, 32))
        self.cfg = TrainConfig(learning_rate=0.05, batch_size=8, max_iterations=150, seed=2)

    def trained(self, cfg: TrainConfig, regu=None):
        model = small_model()
        init_model(model, InitConfig(), np.random.default_rng(0))
        return model, train(model, self.inputs, self.targets, cfg, regu)

    def test_loss_decreases(self):
        """Test that training fits a dilation"""
        _, result = self.trained(self.cfg)
        assert result.iterations == 150
        assert result.stop_reason == "max_iterations"
        assert result.rows[-1].data_loss < result.rows[0].data_loss

    def test_deterministic(self):
        """Test that two runs with the same seeds agree"""
        first, _ = self.trained(self.cfg.copy(update={"max_iterations": 20}))
        second, _ = self.trained(self.cfg.copy(update={"max_iterations": 20}))
        for key, value in first.parameters().items():
            np.testing.assert_array_equal(value, second.parameters()[key])

    def test_no_iterations(self):
        """Test that a zero budget leaves the model untouched"""
        model = small_model()
        init_model(model, InitConfig(), np.random.default_rng(0))
        before = {key: value.copy() for key, value in model.parameters().items()}
        cfg = self.cfg.copy(update={"max_iterations": 0})
        result = train(model, self.inputs, self.targets, cfg)
        assert result.iterations == 0
        for key, value in model.parameters().items():
            np.testing.assert_array_equal(value, before[key])

    def test_epochs_limit(self):
        """Test that the epoch count bounds the iterations"""
        _, result = self.trained(self.cfg.copy(update={"epochs": 2}))
        assert result.iterations == 8

    def test_regularized(self):
        """Test that the regularization term is logged after its delay"""
        regu = ReguConfig(variant=ReguVariant.EXACT, c=0.1, delay_batches=5)
        _, result = self.trained(self.cfg.copy(update={"max_iterations": 10}), regu)
        assert all(row.regu_loss == 0.0 for row in result.rows[:5])
        assert all(row.regu_loss > 0.0 for row in result.rows[5:])

    def test_metrics_file(self, tmp_path):
        """Test the metrics CSV"""
        model = small_model()
        init_model(model, InitConfig(), np.random.default_rng(0))
        path = tmp_path / "metrics.csv"
        cfg = self.cfg.copy(update={"max_iterations": 3})
        train(model, self.inputs, self.targets, cfg, metrics_path=path)
        with open(path, newline="") as file:
            rows = list(csv.reader(file))
        assert rows[0] == ["iteration", "lr", "data_loss", "regu_loss", "total_loss"]
        assert len(rows) == 4

    def test_diverged(self):
        """Test that a non-finite loss stops training"""
        inputs = self.inputs.copy()
        inputs[:] = np.nan
        model = small_model()
        init_model(model, InitConfig(), np.random.default_rng(0))
        with pytest.raises(TrainingDivergedError):
            train(model, inputs, self.targets, self.cfg)

    def test_empty_dataset(self):
        """Test dataset validation"""
        with pytest.raises(TrainingError):
            train(small_model(), self.inputs[:0], self.targets[:0], self.cfg)


class TestPresets:
    """Test named hyperparameter presets"""

    def test_apply_preset(self):
        """Test that config values win over the preset"""
        raw = apply_preset({"preset": "exact", "regu": {"c": 0.5}})
        assert raw["regu"]["variant"] == "exact"
        assert raw["regu"]["c"] == 0.5
        assert raw["regu"]["delay_batches"] == 10000
        assert raw["architecture"]["bias_mode"] == "projected_reparam"
        cfg = RunConfig.parse_obj(raw)
        assert cfg.train.loss == LossKind.CE_SOFTMAX

    def test_no_preset(self):
        """Test that configs without a preset are unchanged"""
        raw = {"seed": 3}
        assert apply_preset(raw) is raw

    def test_unknown_preset(self):
        """Test preset name validation"""
        with pytest.raises(TrainingError):
            apply_preset({"preset": "fancy"})

    @pytest.mark.parametrize("seed", range(5))
    def test_search_space(self, seed):
        """Test that sampled points are valid overrides"""
        overrides = sample_search_config(np.random.default_rng(seed))
        cfg = RunConfig.parse_obj(merge_config(RunConfig().dict(), overrides))
        assert cfg.regu.variant != ReguVariant.NONE
        assert 1e-3 <= cfg.train.learning_rate <= 1e-1
