"""
Tests for the autodiff tensor core.
"""

import unittest

import numpy as np

from errors import EmptySelectionError, GraphError, MissingGradientError, ShapeError
from tensor_core import (
    ParamGroup, Tensor, add, add_bias, backward, concat_channels, conv2d, l1_loss, mul,
    nearest_upsample2x, relu, sgd_step, slice_channels, tensor_sum,
)


class TestOps(unittest.TestCase):
    """Test cases for forward values and gradients of individual ops."""

    def test_add_and_mul_gradients(self):
        """Test that add and mul route gradients to both operands."""
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        backward(tensor_sum(mul(add(a, b), b)))
        # d/da (a+b)*b = b ; d/db = a + 2b
        np.testing.assert_array_equal(a.grad, [3.0, -1.0])
        np.testing.assert_array_equal(b.grad, [7.0, 0.0])

    def test_add_shape_mismatch_names_dimension(self):
        """Test that a shape mismatch in add names the offending dimension."""
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 3, 3, 3)))
        with self.assertRaises(ShapeError) as ctx:
            add(a, b)
        self.assertEqual(ctx.exception.dimension, 1)

    def test_conv2d_channel_mismatch(self):
        """Test that conv2d rejects a weight with the wrong input channel count."""
        x = Tensor(np.zeros((1, 2, 5, 5)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        with self.assertRaises(ShapeError) as ctx:
            conv2d(x, w)
        self.assertEqual(ctx.exception.dimension, 1)

    def test_conv2d_even_kernel_rejected(self):
        """Test that conv2d rejects even kernel sizes."""
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_conv2d_identity_kernel(self):
        """Test conv2d with a centred one-hot kernel."""
        x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), pad=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv2d_one_by_one_scales(self):
        """Test conv2d with a 1x1 kernel."""
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0, 0], [[2.0, 4.0], [6.0, 8.0]])

    def test_conv2d_stride_two_output_size(self):
        """Test that stride 2 with padding halves the spatial size."""
        out = conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)
        self.assertEqual(out.shape, (1, 1, 4, 4))

    def test_conv2d_matches_direct_sum(self):
        """Test that conv2d matches a direct sum over each window."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(4):
                for j in range(4):
                    expected = (padded[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
                    self.assertAlmostEqual(out[0, o, i, j], expected, places=12)

    def test_conv2d_is_linear_without_bias(self):
        """Test that conv2d with zero bias is linear in its input."""
        rng = np.random.default_rng(8)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        bias = Tensor(np.zeros(2))
        x1, x2 = rng.normal(size=(1, 3, 6, 6)), rng.normal(size=(1, 3, 6, 6))
        combined = conv2d(Tensor(2.5 * x1 - 0.5 * x2), w, bias, pad=1).data
        separate = 2.5 * conv2d(Tensor(x1), w, bias, pad=1).data - 0.5 * conv2d(Tensor(x2), w, bias, pad=1).data
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_relu_gradient_zero_at_zero(self):
        """Test that the ReLU gradient is zero at the kink."""
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(tensor_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_concat_and_slice(self):
        """Test that slicing a concat routes gradients to the sliced input only."""
        a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        joined = concat_channels(a, b)
        self.assertEqual(joined.shape, (1, 3, 2, 2))
        backward(tensor_sum(slice_channels(joined, 0, 2)))
        np.testing.assert_array_equal(a.grad, np.ones((1, 2, 2, 2)))
        np.testing.assert_array_equal(b.grad, np.zeros((1, 1, 2, 2)))

    def test_upsample_gradient_sums_blocks(self):
        """Test that the upsample gradient sums each 2x2 block."""
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        up = nearest_upsample2x(x)
        self.assertEqual(up.shape, (1, 1, 4, 4))
        backward(tensor_sum(up))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))

    def test_add_bias_rejects_wrong_shape(self):
        """Test that add_bias rejects a bias of the wrong length."""
        with self.assertRaises(ShapeError):
            add_bias(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(3)))


class TestL1Loss(unittest.TestCase):
    """Test cases for the masked L1 loss."""

    def test_mean_over_valid_only(self):
        """Test that the loss and its gradient average over valid pixels only."""
        pred = Tensor(np.array([[1.0, 5.0], [2.0, 100.0]]), requires_grad=True)
        target = np.array([[2.0, 3.0], [2.0, np.nan]])
        valid = np.array([[1.0, 1.0], [1.0, 0.0]])
        loss = l1_loss(pred, target, valid)
        self.assertAlmostEqual(float(loss.data), 1.0)
        backward(loss)
        np.testing.assert_allclose(pred.grad, [[-1 / 3, 1 / 3], [0.0, 0.0]])

    def test_invalid_pixel_ignored(self):
        """Test that an invalid pixel does not contribute to the loss."""
        loss = l1_loss(Tensor(np.array([2.0, 9.0])), np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        self.assertEqual(float(loss.data), 1.0)

    def test_no_valid_pixels(self):
        """Test that a loss with no valid pixels is an error."""
        with self.assertRaises(EmptySelectionError):
            l1_loss(Tensor(np.zeros(3)), np.zeros(3), np.zeros(3))


class TestBackward(unittest.TestCase):
    """Test cases for reverse-mode accumulation."""

    def test_gradient_accumulates_over_shared_use(self):
        """Test that a tensor used twice receives both gradient contributions."""
        x = Tensor(np.array([2.0]), requires_grad=True)
        backward(tensor_sum(mul(x, x)))
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_second_backward_is_an_error(self):
        """Test that calling backward twice on one loss raises GraphError."""
        x = Tensor(np.array([1.0]), requires_grad=True)
        loss = tensor_sum(x)
        backward(loss)
        with self.assertRaises(GraphError):
            backward(loss)

    def test_intermediate_reuse_after_backward_is_an_error(self):
        """Test that an op reading a node from a consumed graph raises GraphError."""
        x = Tensor(np.ones((1, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        hidden = conv2d(x, w, pad=1)
        backward(tensor_sum(relu(hidden)))
        with self.assertRaises(GraphError):
            tensor_sum(hidden)
        with self.assertRaises(GraphError):
            relu(hidden)

    def test_leaves_reusable_after_backward(self):
        """Test that parameters and inputs build a fresh graph after backward."""
        x = Tensor(np.ones((1, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        backward(tensor_sum(conv2d(x, w, pad=1)))
        first = w.grad.copy()
        w.grad = None
        backward(tensor_sum(conv2d(x, w, pad=1)))
        np.testing.assert_array_equal(w.grad, first)

    def test_non_scalar_loss_rejected(self):
        """Test that backward rejects a non-scalar loss."""
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(GraphError):
            backward(add(x, x))

    def test_unreachable_parameter_gets_zero_gradient(self):
        """Test that a parameter the loss does not reach gets a zero gradient."""
        used = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        backward(tensor_sum(used), wrt=[used, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(3))


class TestSGD(unittest.TestCase):
    """Test cases for the momentum SGD step."""

    def setUp(self):
        self.group = ParamGroup("test")
        self.w = self.group.add("w", np.array([1.0, -2.0]))

    def test_momentum_update(self):
        """Test two momentum steps against hand-computed values."""
        self.w.grad = np.array([1.0, 1.0])
        sgd_step(self.group, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(self.w.data, [0.9, -2.1])
        self.w.grad = np.array([1.0, 1.0])
        sgd_step(self.group, lr=0.1, momentum=0.9)
        # v = 0.9 * 1 + 1 = 1.9
        np.testing.assert_allclose(self.w.data, [0.71, -2.29])

    def test_plain_step(self):
        """Test a step without momentum."""
        w = self.group.add("single", np.array([1.0]))
        self.w.grad = np.zeros(2)
        w.grad = np.array([0.5])
        sgd_step(self.group, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(w.data, [0.95])
        np.testing.assert_array_equal(self.w.data, [1.0, -2.0])

    def test_grads_cleared_after_step(self):
        """Test that a step leaves every gradient cleared to None."""
        self.w.grad = np.array([1.0, 1.0])
        sgd_step(self.group, lr=0.1, momentum=0.0)
        self.assertIsNone(self.w.grad)

    def test_second_step_without_backward(self):
        """Test that stepping twice without a new gradient raises MissingGradientError."""
        self.w.grad = np.array([1.0, 1.0])
        sgd_step(self.group, lr=0.1, momentum=0.9)
        after_first = self.w.data.copy()
        with self.assertRaises(MissingGradientError):
            sgd_step(self.group, lr=0.1, momentum=0.9)
        np.testing.assert_array_equal(self.w.data, after_first)

    def test_zero_lr_leaves_parameters(self):
        """Test that a zero learning rate never moves the parameters."""
        before = self.w.data.copy()
        for _ in range(5):
            self.w.grad = np.array([3.0, -7.0])
            sgd_step(self.group, lr=0.0, momentum=0.9)
        np.testing.assert_array_equal(self.w.data, before)

    def test_missing_gradient(self):
        """Test that a step before any backward raises MissingGradientError."""
        with self.assertRaises(MissingGradientError):
            sgd_step(self.group, lr=0.1, momentum=0.9)

    def test_add_copies_initial_value(self):
        """Test that registering a parameter copies its initial value."""
        source = np.zeros(2)
        t = self.group.add("v", source)
        t.data += 1.0
        np.testing.assert_array_equal(source, np.zeros(2))

    def test_duplicate_name_rejected(self):
        """Test that registering a name twice is an error."""
        with self.assertRaises(ShapeError):
            self.group.add("w", np.zeros(2))


if __name__ == '__main__':
    unittest.main()
