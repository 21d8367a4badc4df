"""Tests for the reverse-mode differentiation core."""

import numpy as np
import pytest

from dmri_metsc import gradcore as gc
from dmri_metsc.errors import DimensionError, ParameterError, UsageError


def _grad_of(loss_fn, value):
    """Analytic gradient of ``loss_fn`` at ``value`` through gradcore."""
    x = gc.Tensor(value, requires_grad=True)
    return gc.backward(loss_fn(x))[x]


def _value_of(loss_fn):
    return lambda v: loss_fn(gc.Tensor(v)).item()


@pytest.mark.unit
class TestTensor:
    """Tests for Tensor construction."""

    def test_data_is_read_only(self):
        """Test tensors wrap immutable arrays."""
        t = gc.Tensor([1.0, 2.0])

        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_rejects_empty_extent(self):
        """Test zero-length axes are rejected."""
        with pytest.raises(DimensionError):
            gc.Tensor(np.zeros((0, 3)))

    def test_constant_ops_record_nothing(self):
        """Test operations on constants build no tape."""
        out = gc.Tensor([1.0]) * 2.0

        assert out.is_leaf
        assert not out.requires_grad


@pytest.mark.unit
class TestGradients:
    """Finite-difference checks of every differentiable operation."""

    @pytest.mark.parametrize(
        "loss_fn",
        [
            lambda x: gc.sum_(x * x * 0.5),
            lambda x: gc.sum_(gc.exp(x) / (1.0 + x * x)),
            lambda x: gc.sum_(gc.atan(x) - x),
            lambda x: gc.sum_(gc.gelu(x) * 3.0),
            lambda x: gc.mean(gc.softmax_rows(gc.reshape(x, (2, 3))) * np.arange(6.0).reshape(2, 3)),
            lambda x: gc.sum_(gc.transpose(gc.reshape(x, (2, 3))) @ np.ones((2, 4))),
            lambda x: gc.sum_(gc.concat([x, x * 2.0], axis=0) * np.arange(12.0)),
            lambda x: gc.sum_(gc.take(x, np.array([0, 2, 2]), axis=0) * np.array([1.0, 2.0, 3.0])),
            lambda x: gc.sum_(gc.sum_(gc.reshape(x, (2, 3)), axis=1) * np.array([1.0, -2.0])),
        ],
    )
    def test_elementwise_and_shape_ops(self, loss_fn, numeric_gradient):
        """Test analytic gradients match central differences."""
        value = np.array([0.3, -0.7, 1.1, 0.05, -1.4, 0.9])

        np.testing.assert_allclose(
            _grad_of(loss_fn, value), numeric_gradient(_value_of(loss_fn), value), rtol=1e-6, atol=1e-8
        )

    def test_matmul(self, numeric_gradient):
        """Test both operands of a matrix product receive gradients."""
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        ta = gc.Tensor(a, requires_grad=True)
        tb = gc.Tensor(b, requires_grad=True)
        grads = gc.backward(gc.sum_((ta @ tb) * (ta @ tb)))

        expected_a = numeric_gradient(lambda v: float(np.sum((v @ b) ** 2)), a)
        expected_b = numeric_gradient(lambda v: float(np.sum((a @ v) ** 2)), b)
        np.testing.assert_allclose(grads[ta], expected_a, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(grads[tb], expected_b, rtol=1e-6, atol=1e-8)

    def test_batched_matmul_broadcasts(self, numeric_gradient):
        """Test a shared weight matrix sums gradients over the batch axes."""
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 5))
        tw = gc.Tensor(w, requires_grad=True)
        grads = gc.backward(gc.sum_(gc.gelu(gc.Tensor(x) @ tw)))

        def value(v):
            return gc.sum_(gc.gelu(gc.Tensor(x) @ gc.Tensor(v))).item()

        np.testing.assert_allclose(grads[tw], numeric_gradient(value, w), rtol=1e-6, atol=1e-8)

    def test_layer_norm(self, numeric_gradient):
        """Test layer norm gradients for input, gain and bias."""
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        gain = rng.normal(size=5)
        bias = rng.normal(size=5)
        weights = rng.normal(size=(3, 5))
        tx, tg, tb = (gc.Tensor(v, requires_grad=True) for v in (x, gain, bias))
        grads = gc.backward(gc.sum_(gc.layer_norm(tx, tg, tb) * weights))

        def loss(xv, gv, bv):
            return gc.sum_(gc.layer_norm(gc.Tensor(xv), gc.Tensor(gv), gc.Tensor(bv)) * weights).item()

        np.testing.assert_allclose(grads[tx], numeric_gradient(lambda v: loss(v, gain, bias), x), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(grads[tg], numeric_gradient(lambda v: loss(x, v, bias), gain), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(grads[tb], numeric_gradient(lambda v: loss(x, gain, v), bias), rtol=1e-5, atol=1e-7)

    def test_shared_leaf_accumulates(self):
        """Test a leaf used twice receives the summed gradient."""
        x = gc.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        grads = gc.backward(gc.sum_(x * x) * 0.5)

        np.testing.assert_allclose(grads[x], [1.0, 2.0, 3.0])

    def test_unreached_leaf_gets_zeros(self):
        """Test listed leaves outside the graph get zero gradients."""
        x = gc.Tensor([1.0, 2.0], requires_grad=True)
        unused = gc.Tensor([[1.0, 2.0]], requires_grad=True)
        grads = gc.backward(gc.sum_(x), leaves=[x, unused])

        np.testing.assert_array_equal(grads[unused], np.zeros((1, 2)))

    def test_backward_needs_scalar(self):
        """Test non-scalar losses are rejected."""
        x = gc.Tensor([1.0, 2.0], requires_grad=True)

        with pytest.raises(UsageError):
            gc.backward(x * 2.0)


@pytest.mark.unit
class TestHardThreshold:
    """Tests for the hard-threshold operator."""

    def test_nonnegative_variant(self):
        """Test negatives and sub-threshold entries are zeroed; the threshold itself survives."""
        out = gc.hard_threshold(gc.Tensor([-2.0, 0.05, 0.1, 0.5]), 0.1)

        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.1, 0.5])

    def test_symmetric_variant(self):
        """Test magnitude thresholding keeps large negatives."""
        out = gc.hard_threshold(gc.Tensor([-2.0, 0.05, 0.5]), 0.1, nonneg=False)

        np.testing.assert_array_equal(out.data, [-2.0, 0.0, 0.5])

    def test_gradient_passes_on_support(self):
        """Test the input gradient is the support indicator."""
        x = gc.Tensor([-1.0, 0.05, 0.3], requires_grad=True)
        grads = gc.backward(gc.sum_(gc.hard_threshold(x, 0.1)))

        np.testing.assert_array_equal(grads[x], [0.0, 0.0, 1.0])

    def test_threshold_receives_relaxed_gradient(self):
        """Test a learnable threshold gets a finite, non-positive gradient for positive inputs."""
        x = gc.Tensor([0.09, 0.11, 0.5])
        lam = gc.Tensor(0.1, requires_grad=True)
        grads = gc.backward(gc.sum_(gc.hard_threshold(x, lam)))

        assert np.isfinite(grads[lam]).all()
        assert grads[lam] < 0

    @pytest.mark.parametrize("nonneg", [True, False])
    def test_idempotent(self, nonneg):
        """Test thresholding a thresholded vector changes nothing."""
        x = np.random.default_rng(7).normal(0.0, 0.3, 50)
        once = gc.hard_threshold(gc.Tensor(x), 0.2, nonneg=nonneg)
        twice = gc.hard_threshold(once, 0.2, nonneg=nonneg)

        np.testing.assert_array_equal(twice.data, once.data)
        assert np.count_nonzero(once.data) > 0

    def test_non_positive_threshold(self):
        """Test zero thresholds are rejected."""
        with pytest.raises(ParameterError):
            gc.hard_threshold(gc.Tensor([1.0]), 0.0)


@pytest.mark.unit
class TestLayers:
    """Tests for network building blocks."""

    def test_softmax_rows_sum_to_one(self):
        """Test softmax is stable for large logits."""
        out = gc.softmax_rows(gc.Tensor([[1000.0, 1001.0], [0.0, 0.0]]))

        np.testing.assert_allclose(out.data.sum(axis=1), [1.0, 1.0])
        assert np.all(np.isfinite(out.data))

    def test_dropout_identity_in_inference(self):
        """Test dropout is the identity when not training."""
        x = gc.Tensor(np.ones((4, 4)))

        assert gc.dropout(x, 0.5, training=False) is x

    def test_dropout_preserves_expectation(self):
        """Test inverted dropout keeps the mean close to the input."""
        x = gc.Tensor(np.ones(20000))
        out = gc.dropout(x, 0.25, np.random.default_rng(0))

        assert out.data.mean() == pytest.approx(1.0, abs=0.02)

    def test_matmul_shape_mismatch(self):
        """Test mismatched inner extents raise a dimension error naming both shapes."""
        with pytest.raises(DimensionError, match=r"\(2, 3\)"):
            gc.matmul(gc.Tensor(np.ones((2, 3))), gc.Tensor(np.ones((2, 3))))

    def test_layer_norm_shape_check(self):
        """Test gain and bias must match the feature axis."""
        with pytest.raises(DimensionError):
            gc.layer_norm(gc.Tensor(np.ones((2, 3))), np.ones(2), np.zeros(2))


@pytest.mark.unit
class TestAdam:
    """Tests for the Adam update."""

    def test_first_step_moves_by_lr(self):
        """Test the bias-corrected first step has magnitude lr along the gradient sign."""
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.5, -2.0])}
        new, state = gc.adam_step(params, grads, gc.AdamState.zeros_like(params), lr=0.1)

        np.testing.assert_allclose(new["w"], [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_inputs_untouched(self):
        """Test the update returns new arrays."""
        params = {"w": np.array([1.0])}
        gc.adam_step(params, {"w": np.array([1.0])}, gc.AdamState(), lr=0.1)

        assert params["w"][0] == 1.0

    def test_minimizes_quadratic(self):
        """Test repeated steps approach the minimum of a quadratic."""
        params = {"w": np.array([3.0, -2.0])}
        state = gc.AdamState.zeros_like(params)
        for _ in range(500):
            params, state = gc.adam_step(params, {"w": 2.0 * params["w"]}, state, lr=0.05)

        np.testing.assert_allclose(params["w"], [0.0, 0.0], atol=0.1)
