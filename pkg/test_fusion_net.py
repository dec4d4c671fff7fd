"""
Tests for the fusion network variants.
"""

import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import ConfigError, MaskMismatchError, ShapeError
from fusion_net import (
    ModelConfig, build_model, context_encoder, context_receptive_radius, demonstrate,
    demonstration_receptive_radius, depth_encoder, forward, forward_context_only, forward_for, group_names,
    aggregate, predict, PREDICTION_BLOCKS,
)
from layers import ObservationMask
from tensor_core import Tensor


def tiny_config(variant="inductive", **overrides):
    return ModelConfig(variant=variant, context_widths=(2, 2, 4), context_channels=2,
                       depth_channels=2, demo_channels=2, **overrides)


def sparse_inputs(rng, size=16, observed=10):
    rgb = rng.uniform(size=(1, 3, size, size))
    flat = np.zeros(size * size)
    flat[rng.choice(size * size, observed, replace=False)] = 1.0
    mask = ObservationMask(flat.reshape(1, 1, size, size))
    sparse = np.where(mask.data > 0, rng.uniform(0.5, 10.0, size=mask.shape), 0.0)
    return rgb, sparse, mask


class TestModelConfig(unittest.TestCase):
    """Test cases for ModelConfig validation."""

    def test_default_widths_are_valid(self):
        """Test that the default config validates."""
        ModelConfig().validate()

    def test_odd_up_projection_input_rejected(self):
        """Test that widths giving an odd up-projection input are rejected."""
        with self.assertRaises(ConfigError):
            ModelConfig(context_widths=(3, 4, 8)).validate()

    def test_unknown_variant(self):
        """Test that an unknown variant raises ConfigError."""
        with self.assertRaises(ConfigError):
            ModelConfig(variant="transformer").validate()

    def test_depth_layers_restricted(self):
        """Test that only 3 or 5 depth encoder layers are accepted."""
        with self.assertRaises(ConfigError):
            ModelConfig(depth_encoder_layers=4).validate()


class TestBuildModel(unittest.TestCase):
    """Test cases for build_model."""

    def test_deterministic_in_seed(self):
        """Test that the same seed gives identical parameters."""
        first = dict(build_model(tiny_config(), seed=5).named_parameters())
        second = dict(build_model(tiny_config(), seed=5).named_parameters())
        for name, tensor in first.items():
            np.testing.assert_array_equal(tensor.data, second[name].data)

    def test_groups_per_variant(self):
        """Test the parameter groups each variant builds."""
        self.assertEqual(group_names(build_model(tiny_config())),
                         ["context_encoder", "depth_encoder", "demonstration", "prediction"])
        self.assertEqual(group_names(build_model(tiny_config("vanilla"))),
                         ["context_encoder", "depth_encoder", "fusion"])
        self.assertEqual(group_names(build_model(tiny_config("context_only"))),
                         ["context_encoder", "prediction"])

    def test_five_layer_depth_encoder(self):
        """Test the five-layer depth encoder kernels."""
        model = build_model(tiny_config(depth_encoder_layers=5))
        self.assertIn("scn4.weight", model.group("depth_encoder"))
        self.assertEqual(model.group("depth_encoder")["scn0.weight"].shape[-1], 11)


    def test_vanilla_parameter_count_close_to_inductive(self):
        """Test that vanilla late fusion has within 10% of the inductive parameter count."""
        inductive = build_model(ModelConfig(variant="inductive")).num_parameters()
        vanilla = build_model(ModelConfig(variant="vanilla")).num_parameters()
        self.assertLessEqual(abs(vanilla - inductive), 0.1 * inductive)


class TestForward(unittest.TestCase):
    """Test cases for the forward passes."""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.rgb, self.sparse, self.mask = sparse_inputs(self.rng)

    def test_every_variant_predicts_full_resolution(self):
        """Test that every variant predicts a nonnegative full-resolution map."""
        for variant in ("inductive", "vanilla", "context_only", "early_fusion"):
            model = build_model(tiny_config(variant), seed=1)
            pred = forward_for(model)(self.rgb, self.sparse, self.mask, model)
            self.assertEqual(pred.shape, (1, 1, 16, 16), variant)
            self.assertTrue((pred.data >= 0).all(), variant)

    def test_no_observations_still_predicts(self):
        """Test that an empty mask still gives a finite prediction."""
        model = build_model(tiny_config(), seed=1)
        pred = forward(self.rgb, np.zeros((1, 1, 16, 16)), ObservationMask.zeros(1, 16, 16), model)
        self.assertTrue(np.isfinite(pred.data).all())

    def test_strict_mode_rejects_stray_depth(self):
        """Test that strict mode rejects depth outside the mask."""
        model = build_model(tiny_config(), seed=1)
        stray = self.sparse + (1.0 - self.mask.data)
        with self.assertRaises(MaskMismatchError):
            forward(self.rgb, stray, self.mask, model)

    def test_image_size_must_divide_by_eight(self):
        """Test that the context encoder rejects sizes not divisible by 8."""
        model = build_model(tiny_config(), seed=1)
        with self.assertRaises(ShapeError):
            context_encoder(np.zeros((1, 3, 12, 16)), model)

    def test_context_only_ignores_depth(self):
        """Test that the context-only variant ignores sparse depth."""
        model = build_model(tiny_config("context_only"), seed=1)
        first = forward_context_only(self.rgb, model)
        second = forward_for(model)(self.rgb, self.sparse * 2.0, self.mask, model)
        np.testing.assert_array_equal(first.data, second.data)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_unobserved_depth_values_never_matter(self, seed):
        """Test that depth values at unobserved pixels never change the prediction."""
        rng = np.random.default_rng(seed)
        rgb, sparse, mask = sparse_inputs(rng, observed=int(rng.integers(0, 40)))
        model = build_model(tiny_config(), seed=2)
        noise = np.where(mask.data > 0, 0.0, rng.normal(scale=100.0, size=sparse.shape))
        first = forward(rgb, sparse, mask, model, strict=False)
        second = forward(rgb, sparse + noise, mask, model, strict=False)
        np.testing.assert_array_equal(first.data, second.data)

    def test_depth_encoder_keeps_resolution(self):
        """Test that the depth encoder keeps HxW and never shrinks the mask."""
        model = build_model(tiny_config(), seed=1)
        features, propagated = depth_encoder(self.sparse, self.mask, model)
        self.assertEqual(features.shape, (1, 2, 16, 16))
        self.assertGreaterEqual(propagated.count(), self.mask.count())


class TestDemonstrationAndPrediction(unittest.TestCase):
    """Test cases for demonstrate, aggregate and predict."""

    def setUp(self):
        self.rng = np.random.default_rng(6)
        self.model = build_model(tiny_config(), seed=4)

    def test_zero_demonstration_weights_give_zero_aggregate(self):
        """Test that an all-zero demonstration network aggregates to zero."""
        for _, tensor in self.model.group("demonstration").items():
            tensor.data[...] = 0.0
        x = Tensor(self.rng.normal(size=(1, 2, 8, 8)))
        y = Tensor(self.rng.normal(size=(1, 2, 8, 8)))
        mask = ObservationMask((self.rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64))
        r_agg = aggregate(demonstrate(x, y, mask, self.model), mask, 0)
        np.testing.assert_array_equal(r_agg.data, np.zeros((1, 2, 8, 8)))

    def test_identical_pixels_get_identical_predictions(self):
        """Test that pixels with identical surroundings get identical depth."""
        size = 32
        x = Tensor(np.broadcast_to(self.rng.normal(size=(1, 2, 1, 1)), (1, 2, size, size)).copy())
        r_agg = Tensor(np.broadcast_to(self.rng.normal(size=(1, 2, 1, 1)), (1, 2, size, size)).copy())
        pred = predict(x, r_agg, self.model, clamp=False).data
        margin = 2 * PREDICTION_BLOCKS + 1
        interior = pred[..., margin:size - margin, margin:size - margin]
        np.testing.assert_allclose(interior, np.full(interior.shape, interior[0, 0, 0, 0]), rtol=1e-12, atol=1e-12)

    def test_unclamped_prediction_keeps_negative_depth(self):
        """Test that clamp=False returns the raw head output and clamp=True its positive part."""
        self.model.group("prediction")["head.bias"].data[...] = -100.0
        x = Tensor(self.rng.normal(size=(1, 2, 8, 8)))
        r_agg = Tensor(self.rng.normal(size=(1, 2, 8, 8)))
        raw = predict(x, r_agg, self.model, clamp=False).data
        clamped = predict(x, r_agg, self.model).data
        self.assertTrue((raw < 0).all())
        np.testing.assert_array_equal(clamped, np.maximum(raw, 0.0))


class TestReceptiveFields(unittest.TestCase):
    """Test cases for receptive field bounds."""

    def test_demonstration_is_local(self):
        """Test that a depth change beyond the radius leaves demonstrations unchanged."""
        rng = np.random.default_rng(4)
        model = build_model(tiny_config(), seed=3)
        radius = demonstration_receptive_radius()
        size = 2 * radius + 8
        x = Tensor(rng.normal(size=(1, 2, size, size)))
        y = rng.normal(size=(1, 2, size, size))
        mask = ObservationMask.ones(1, size, size)
        before = demonstrate(x, Tensor(y), mask, model).data
        y[0, :, 0, 0] += 10.0
        after = demonstrate(x, Tensor(y), mask, model).data
        centre = radius + 1
        np.testing.assert_array_equal(before[..., centre:, centre:], after[..., centre:, centre:])

    def test_constant_image_gives_constant_interior(self):
        """Test that a constant image gives constant context features away from the border."""
        model = build_model(tiny_config(), seed=3)
        radius = context_receptive_radius()
        size = 192
        features = context_encoder(np.full((1, 3, size, size), 0.5), model).data
        margin = radius + 8
        interior = features[:, :, margin:size - margin, margin:size - margin]
        self.assertGreater(interior.shape[-1], 0)
        reference = interior[:, :, :1, :1]
        np.testing.assert_allclose(interior, np.broadcast_to(reference, interior.shape), rtol=1e-12, atol=1e-12)


if __name__ == '__main__':
    unittest.main()
