import numpy as np
import pytest
from bimonn.autodiff import Graph, finite_diff_check
from bimonn.binarize import constant_distance, project_activable, threshold_candidates
from bimonn.constants import BiasMode, LayerKind, Operation, ReguVariant, WeightMode
from bimonn.layers import BimonnModel
from bimonn.mdl.settings import ArchitectureConfig, LayerSpec, ReguConfig
from bimonn.qpsolve import QpProblem, qp_project
from bimonn.regularize import (
    RegularizationError,
    constant_set_loss,
    loss_acti,
    loss_exact,
    loss_normal,
    loss_unif,
    optimal_constant_mask,
    regu_total,
)


class TestConstantLosses:
    """Test losses towards constant weights"""

    @pytest.fixture(autouse=True)
    def setup(self):
        self.rng = np.random.default_rng(21)

    def test_constant_set_loss(self):
        """Test the squared distance to constant weights"""
        weights = np.array([1.0, 1.0, 0.1])
        loss = constant_set_loss(weights, np.array([True, True, False]))
        assert loss.value == pytest.approx(0.01)
        with pytest.raises(RegularizationError):
            constant_set_loss(weights, np.zeros(3, dtype=bool))

    def test_unif_and_normal(self):
        """Test the mean thresholded sets"""
        weights = np.array([[1.0, 1.0, 0.1], [0.5, 0.4, 0.3]])
        assert loss_unif(weights).value[0] == pytest.approx(0.01)
        # mean 0.4: two thirds keeps every cell, three quarters drops the smallest
        assert loss_unif(weights).value[1] == pytest.approx(0.5 - 1.2**2 / 3)
        assert loss_normal(weights).value[1] == pytest.approx(0.5 - 0.9**2 / 2)

    def test_negative_weights(self):
        """Test that negative weights are rejected"""
        with pytest.raises(RegularizationError):
            loss_unif(np.array([1.0, -0.5]))
        with pytest.raises(RegularizationError):
            loss_exact(np.array([1.0, -0.5]))

    def test_optimal_mask(self):
        """Test the sorted prefix search against every thresholded set"""
        weights = self.rng.uniform(0.0, 1.0, (20, 9))
        masks = optimal_constant_mask(weights)
        for row, mask in zip(weights, masks):
            best = min(constant_distance(row, m) for m in threshold_candidates(row))
            assert constant_distance(row, mask) == pytest.approx(best)

    def test_optimal_mask_ties(self):
        """Test repeated weight values"""
        weights = np.array([0.5, 0.0, 0.5, 0.0])
        np.testing.assert_array_equal(optimal_constant_mask(weights), [True, False, True, False])
        assert loss_exact(weights).value == pytest.approx(0.0)

    def test_exact_gradient(self):
        """Test gradients of the exact loss"""
        graph = Graph(loss_exact, [(9,)], ["weights"])
        point = [self.rng.uniform(0.1, 1.0, 9)]
        assert finite_diff_check(graph, point).passed


class TestActivableLoss:
    """Test the distance to the activable parameters"""

    @pytest.fixture(autouse=True)
    def setup(self):
        self.rng = np.random.default_rng(22)

    @pytest.mark.parametrize("delta", [0.5, 0.4])
    def test_matches_projection(self, delta):
        """Test that the loss is the squared projection distance"""
        for _ in range(20):
            weights = self.rng.uniform(0.0, 1.0, 9)
            bias = self.rng.uniform(0.0, weights.sum())
            result = project_activable(weights, bias, delta)
            loss = loss_acti(weights, bias, delta)
            assert loss.value == pytest.approx(result.distance**2, abs=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("delta", [0.5, 0.4])
    def test_matches_solver_distance(self, delta):
        """Test the loss against the solver distance on 200 dilation optimal neurons"""
        checked = 0
        while checked < 200:
            weights = self.rng.uniform(0.0, 1.0, 9)
            bias = self.rng.uniform(0.0, weights.sum())
            result = project_activable(weights, bias, delta)
            if result.operation != Operation.DILATION:
                continue
            anchor = np.append(weights, bias)
            problem = QpProblem(anchor=anchor, rows=result.rows, bounds=np.zeros(len(result.rows)))
            solution = qp_project(problem)
            loss = loss_acti(weights, bias, delta)
            assert loss.value == pytest.approx(solution.distance(anchor) ** 2, abs=1e-5)
            checked += 1

    def test_activated_neuron(self):
        """Test that an activated neuron has no loss"""
        weights = np.array([1.0, 1.0, 0.0, 1.0])
        assert loss_acti(weights, 0.5).value == pytest.approx(0.0, abs=1e-12)

    def test_gradient(self):
        """Test gradients with the element and active set held fixed"""
        for _ in range(5):
            weights = self.rng.uniform(0.1, 1.0, 6)
            bias = self.rng.uniform(0.0, weights.sum())
            graph = Graph(loss_acti, [(6,), ()], ["weights", "bias"])
            assert finite_diff_check(graph, [weights, bias]).passed

    def test_large_kernel(self):
        """Test that kernels over the cap use the exact loss"""
        weights = self.rng.uniform(0.0, 1.0, 9)
        loss = loss_acti(weights, 1.0, activable_cap=4)
        assert loss.value == pytest.approx(loss_exact(weights).value)

    def test_single_neuron_only(self):
        """Test shape validation"""
        with pytest.raises(RegularizationError):
            loss_acti(np.ones((2, 3)), 0.5)


class TestReguTotal:
    """Test the weighted loss over a model"""

    @pytest.fixture(autouse=True)
    def setup(self):
        rng = np.random.default_rng(23)
        architecture = ArchitectureConfig(
            layers=[
                LayerSpec(kind=LayerKind.BISEL, in_channels=1, out_channels=2, kernel_size=3),
                LayerSpec(kind=LayerKind.DENSE_LUI, in_channels=2 * 4 * 4, out_channels=2),
            ],
            weight_mode=WeightMode.POSITIVE,
            bias_mode=BiasMode.POSITIVE,
        )
        self.model = BimonnModel(architecture)
        self.model.set_parameters(
            {key: rng.normal(size=value.shape) for key, value in self.model.parameters().items()}
        )

    def test_disabled(self):
        """Test the none variant and a zero coefficient"""
        assert regu_total(self.model, ReguConfig(), 0).value == 0.0
        cfg = ReguConfig(variant=ReguVariant.EXACT, c=0.0)
        assert regu_total(self.model, cfg, 0).value == 0.0

    def test_delay(self):
        """Test that the loss starts after the delay"""
        cfg = ReguConfig(variant=ReguVariant.EXACT, c=1.0, delay_batches=5)
        assert regu_total(self.model, cfg, 4).value == 0.0
        assert regu_total(self.model, cfg, 5).value > 0.0

    def test_exact_sum(self):
        """Test the weighted sum over every neuron"""
        cfg = ReguConfig(variant=ReguVariant.EXACT, c=2.0)
        expected = 2.0 * sum(
            float(loss_exact(view.weights).value) for view in self.model.neurons()
        )
        assert regu_total(self.model, cfg, 0).value == pytest.approx(expected)

    def test_acti_sum(self):
        """Test the activable variant against per neuron projections"""
        cfg = ReguConfig(variant=ReguVariant.ACTI, c=0.5)
        expected = 0.5 * sum(
            project_activable(view.weights, view.bias).distance ** 2
            for view in self.model.neurons()
        )
        assert regu_total(self.model, cfg, 0).value == pytest.approx(expected, abs=1e-6)
