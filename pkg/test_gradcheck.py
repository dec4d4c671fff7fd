"""
Tests for the finite-difference gradient checker.
"""

import unittest

import numpy as np

from fusion_net import build_model
from gradcheck import (
    TOLERANCE, check_fusion_net, check_layers, check_tensor_core, format_results, jitter_biases,
    numerical_gradient, relative_error, run_gradchecks, tiny_model_config,
)


class TestHelpers(unittest.TestCase):
    """Test cases for the finite-difference helpers."""

    def test_numerical_gradient_of_square(self):
        """Test central differences of a square and that the array is restored."""
        x = np.array([1.0, -3.0])
        grads = numerical_gradient(lambda: float((x ** 2).sum()), x, [(0,), (1,)])
        np.testing.assert_allclose(grads, [2.0, -6.0], rtol=1e-8)
        np.testing.assert_array_equal(x, [1.0, -3.0])

    def test_relative_error_floor(self):
        """Test relative error with the absolute floor for tiny gradients."""
        self.assertEqual(relative_error(1.0, 1.0), 0.0)
        self.assertAlmostEqual(relative_error(2.0, 1.0), 0.5)
        # tiny gradients are compared against the floor
        self.assertLess(relative_error(1e-9, 0.0), TOLERANCE)


    def test_jitter_moves_biases_only(self):
        """Test that jitter_biases moves every bias off zero and leaves weights alone."""
        model = build_model(tiny_model_config(), seed=0)
        tensors = dict(model.named_parameters())
        weights = {name: t.data.copy() for name, t in tensors.items() if not name.endswith("bias")}
        jitter_biases(tensors, np.random.default_rng(0))
        for name, tensor in tensors.items():
            if name.endswith("bias"):
                self.assertTrue((tensor.data != 0.0).all(), name)
            else:
                np.testing.assert_array_equal(tensor.data, weights[name])


class TestChecks(unittest.TestCase):
    """Test cases for the gradient check suites."""

    def test_tensor_core(self):
        """Test that every tensor_core op passes."""
        ok, data = check_tensor_core()
        self.assertTrue(ok, data)
        self.assertEqual(data["cases"], 13)

    def test_layers(self):
        """Test that the layer checks pass."""
        ok, data = check_layers()
        self.assertTrue(ok, data)

    def test_inductive_model_end_to_end(self):
        """Test the whole inductive model with four observed pixels, every parameter entry checked."""
        ok, data = check_fusion_net(variant="inductive", observed=4)
        self.assertTrue(ok, data)
        self.assertLess(data["max_rel_err"], TOLERANCE)
        self.assertEqual(data["entries"], build_model(tiny_model_config(), seed=0).num_parameters())

    def test_vanilla_model_end_to_end(self):
        """Test the whole vanilla late-fusion model."""
        ok, data = check_fusion_net(variant="vanilla", observed=4)
        self.assertTrue(ok, data)

    def test_report_format(self):
        """Test the report header and per-suite line."""
        results = run_gradchecks("tensor_core")
        self.assertEqual(list(results), ["tensor_core"])
        text = format_results(results)
        self.assertTrue(text.startswith("Gradient check: PASSED"))
        self.assertIn("✓ tensor_core", text)

    def test_unknown_module(self):
        """Test that an unknown suite name raises KeyError."""
        with self.assertRaises(KeyError):
            run_gradchecks("optimizer")


if __name__ == '__main__':
    unittest.main()
