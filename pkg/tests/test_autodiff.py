import numpy as np
import pytest
from bimonn import autodiff as ad
from bimonn.autodiff import (
    AutodiffError,
    Graph,
    NonFiniteError,
    ShapeMismatchError,
    Tape,
    Tensor,
    backward_grad,
    finite_diff_check,
    forward_eval,
)


class TestTape:
    """Test recording and the backward pass"""

    @pytest.fixture(autouse=True)
    def setup(self):
        self.tape = Tape()
        self.x = self.tape.leaf(np.array([1.0, 2.0, 3.0]), "x")

    def test_product_gradient(self):
        """Test gradient of a product with a constant"""
        out = ad.reduce_sum(self.x * np.array([2.0, 0.0, -1.0]))
        grads = backward_grad(self.tape, 1.0, out)
        np.testing.assert_allclose(grads["x"], [2.0, 0.0, -1.0])

    def test_reused_node_accumulates(self):
        """Test that a tensor used twice receives both contributions"""
        out = ad.reduce_sum(self.x * self.x + self.x)
        grads = backward_grad(self.tape, 1.0, out)
        np.testing.assert_allclose(grads["x"], 2.0 * self.x.value + 1.0)

    def test_ndarray_on_the_left(self):
        """Test that numpy arrays combine with tensors without becoming object arrays"""
        out = np.array([1.0, 1.0, 1.0]) - self.x
        assert isinstance(out, Tensor)
        np.testing.assert_allclose(out.value, [0.0, -1.0, -2.0])

    def test_unused_leaf_gets_zeros(self):
        """Test that leaves the output does not depend on get zero gradients"""
        other = self.tape.leaf(np.ones((2, 2)), "other")
        out = ad.reduce_sum(self.x)
        grads = backward_grad(self.tape, 1.0, out)
        np.testing.assert_array_equal(grads["other"], np.zeros_like(other.value))

    def test_seed_shape_mismatch(self):
        """Test that a seed of the wrong shape is rejected"""
        out = self.x * 2.0
        with pytest.raises(ShapeMismatchError):
            backward_grad(self.tape, np.ones(2), out)

    def test_non_finite_leaf(self):
        """Test that leaves must be finite"""
        with pytest.raises(NonFiniteError):
            self.tape.leaf(np.array([np.nan]), "bad")

    def test_mixed_tapes(self):
        """Test that tensors of two tapes cannot be combined"""
        other = Tape().leaf(np.ones(3), "y")
        with pytest.raises(AutodiffError):
            ad.add(self.x, other)

    def test_broadcast_mismatch_names_node(self):
        """Test that incompatible shapes raise a diagnostic naming the operation"""
        with pytest.raises(ShapeMismatchError, match="add"):
            ad.add(self.x, np.ones(4))

    def test_constants_are_not_recorded(self):
        """Test that operations on constants stay off the tape"""
        before = len(self.tape.nodes)
        ad.exp(Tensor(np.ones(3)))
        assert len(self.tape.nodes) == before


class TestGraph:
    """Test forward_eval and finite_diff_check"""

    @pytest.fixture(autouse=True)
    def setup(self):
        self.rng = np.random.default_rng(0)

    def test_forward_eval_shapes(self):
        """Test that inputs must match the declared shapes"""
        graph = Graph(lambda a: ad.reduce_sum(a), [(2, 2)])
        with pytest.raises(ShapeMismatchError):
            forward_eval(graph, [np.ones(3)])

    def test_forward_eval_records_output(self):
        """Test that the output is recorded on the tape"""
        graph = Graph(lambda a: ad.tanh(a), [(3,)], ["a"])
        out = forward_eval(graph, [np.zeros(3)])
        assert out.tape.output is out
        grads = backward_grad(out.tape, np.ones(3))
        np.testing.assert_allclose(grads["a"], np.ones(3))

    def test_constant_graph(self):
        """Test that a graph ignoring its input has zero gradient"""
        graph = Graph(lambda a: Tensor(np.ones(2)), [(2,)], ["a"])
        out = forward_eval(graph, [np.zeros(2)])
        np.testing.assert_array_equal(backward_grad(out.tape, np.ones(2))["a"], np.zeros(2))

    @pytest.mark.parametrize(
        "name, fn, shapes",
        [
            ("exp_log", lambda a: ad.log(ad.exp(a) + 1.0), [(4,)]),
            ("softplus", lambda a: ad.softplus(a) * a, [(4,)]),
            ("xi", lambda a: ad.xi(a * 3.0), [(4,)]),
            ("power", lambda a: ad.power(ad.exp(a), 3.0), [(4,)]),
            ("div", lambda a, b: a / (ad.exp(b) + 1.0), [(3,), (3,)]),
            ("mean_axis", lambda a: ad.mean(a * a, axis=1), [(2, 3)]),
            (
                "log_softmax",
                lambda a: ad.log_softmax(a, axis=1) * np.arange(6.0).reshape(2, 3),
                [(2, 3)],
            ),
            ("concat", lambda a, b: ad.concat([a, b * b], axis=0), [(2,), (3,)]),
            ("gather", lambda a: ad.gather(a, np.array([[2, 0], [1, 1]])) ** 2.0, [(2, 3)]),
            ("where", lambda a, b: ad.where(np.array([True, False, True]), a * a, b), [(3,), (3,)]),
            ("einsum", lambda a, b: ad.einsum("ij,jk->ik", a, b), [(2, 3), (3, 2)]),
            ("conv2d", lambda x, w: ad.conv2d(x, w), [(2, 2, 5, 6), (2, 3, 3, 3)]),
        ],
    )
    def test_finite_differences(self, name, fn, shapes):
        """Test analytic gradients against central differences"""
        graph = Graph(fn, shapes, name=name)
        point = [self.rng.normal(size=shape) for shape in shapes]
        report = finite_diff_check(graph, point, step=1e-5, tolerance=1e-4)
        assert report.passed, report.errors

    def test_finite_diff_rejects_bad_step(self):
        """Test that the step must be positive"""
        graph = Graph(lambda a: a, [(1,)])
        with pytest.raises(ValueError):
            finite_diff_check(graph, [np.zeros(1)], step=0.0)


class TestConv2d:
    """Test the true convolution used by the BiSE stage"""

    def test_single_impulse(self):
        """Test that an impulse reproduces the kernel centered on it"""
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        out = ad.conv2d(x, w).value[0, 0, 0]
        np.testing.assert_allclose(out[1:4, 1:4], w[0, 0])

    def test_matches_direct_sum(self):
        """Test against the definition out(i) = sum_k w(k) x(i - k)"""
        rng = np.random.default_rng(1)
        x = rng.random((1, 1, 6, 7))
        w = rng.random((1, 1, 3, 3))
        out = ad.conv2d(x, w).value[0, 0, 0]
        padded = np.pad(x[0, 0], 1)
        expected = np.zeros((6, 7))
        for i in range(6):
            for j in range(7):
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        expected[i, j] += w[0, 0, di + 1, dj + 1] * padded[i - di + 1, j - dj + 1]
        np.testing.assert_allclose(out, expected)

    def test_even_kernel(self):
        """Test that even kernel extents are rejected"""
        with pytest.raises(ShapeMismatchError):
            ad.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))
