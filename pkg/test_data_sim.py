"""
Tests for scene synthesis, sparsification, augmentation and the dataset manifest.
"""

import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from data_sim import (
    AugmentParams, SamplerConfig, apply_augment, augment, band_crop, bernoulli_sample, dataset_manifest,
    default_band, sample_sparse, split_counts, synth_scene, uniform_sample, write_dataset, MANIFEST_NAME,
)
from errors import EmptySelectionError, ManifestError, ShapeError
from image_io import write_pfm, write_ppm
from prng import derive_seed


def edge_map(image: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels whose right or lower neighbour differs by more than threshold in any channel"""
    edges = np.zeros(image.shape[1:], dtype=bool)
    edges[:, :-1] |= (np.abs(np.diff(image, axis=2)) > threshold).any(axis=0)
    edges[:-1, :] |= (np.abs(np.diff(image, axis=1)) > threshold).any(axis=0)
    return edges


class TestSynthScene(unittest.TestCase):
    """Test cases for synth_scene."""

    def test_same_seed_same_frame(self):
        """Test that the same seed gives an identical frame."""
        first, second = synth_scene(11, 32, 32), synth_scene(11, 32, 32)
        np.testing.assert_array_equal(first.rgb, second.rgb)
        np.testing.assert_array_equal(first.depth_gt, second.depth_gt)
        self.assertEqual(first.id, second.id)

    def test_depth_range_and_validity(self):
        """Test the depth range, full validity and RGB range."""
        for seed in range(10):
            frame = synth_scene(seed, 32, 48)
            self.assertEqual(frame.rgb.shape, (3, 32, 48))
            self.assertGreaterEqual(frame.depth_gt.min(), 0.5)
            self.assertLessEqual(frame.depth_gt.max(), 10.0)
            self.assertTrue((frame.valid_gt == 1.0).all())
            self.assertTrue(((frame.rgb >= 0) & (frame.rgb <= 1)).all())

    def test_color_edges_follow_depth_edges(self):
        """Test that color edges coincide with depth edges."""
        for seed in range(10):
            frame = synth_scene(seed, 64, 64, difficulty=1.0)
            depth_edges = edge_map(frame.depth_gt, 0.3)
            rgb_edges = edge_map(frame.rgb, 0.1)
            union = depth_edges | rgb_edges
            if union.any():
                self.assertGreaterEqual((depth_edges & rgb_edges).sum() / union.sum(), 0.95)

    def test_image_fixes_depth_only_up_to_the_lift(self):
        """Test that bottom-row ground looks the same in every scene while its depth varies."""
        colors, depths = [], []
        for seed in range(20):
            frame = synth_scene(seed, 32, 32)
            bottom = frame.rgb[:, -1, :]
            ground = np.isclose(bottom[0], bottom[1]) & np.isclose(bottom[1], bottom[2])
            if ground.any():
                colors.append(bottom[0, ground][0])
                depths.append(frame.depth_gt[0, -1, ground][0])
        self.assertGreater(len(depths), 5)
        np.testing.assert_allclose(colors, colors[0], rtol=1e-12)
        self.assertGreater(max(depths) - min(depths), 0.5)

    def test_size_must_divide_by_eight(self):
        """Test that a size not divisible by 8 raises ShapeError."""
        with self.assertRaises(ShapeError):
            synth_scene(0, 30, 32)


class TestSampling(unittest.TestCase):
    """Test cases for uniform and Bernoulli sampling."""

    def setUp(self):
        self.frame = synth_scene(3, 64, 64)

    def test_exact_count(self):
        """Test that uniform sampling picks exactly the requested count."""
        _, mask = uniform_sample(self.frame, SamplerConfig(samples=200, seed=1))
        self.assertEqual(mask.count(), 200)

    def test_zero_samples(self):
        """Test uniform sampling with zero samples."""
        sparse, mask = uniform_sample(self.frame, SamplerConfig(samples=0, seed=1))
        self.assertEqual(mask.count(), 0)
        self.assertFalse(sparse.any())

    def test_all_pixels(self):
        """Test that sampling every pixel reproduces the ground truth."""
        n = 64 * 64
        sparse, mask = uniform_sample(self.frame, SamplerConfig(samples=n, seed=1))
        np.testing.assert_array_equal(mask.data[0], self.frame.valid_gt)
        np.testing.assert_array_equal(sparse, self.frame.depth_gt * self.frame.valid_gt)

    def test_too_many_samples(self):
        """Test that asking for more samples than valid pixels is an error."""
        with self.assertRaises(EmptySelectionError):
            uniform_sample(self.frame, SamplerConfig(samples=64 * 64 + 1, seed=1))

    def test_seeded(self):
        """Test that sampling is deterministic in the seed."""
        first = uniform_sample(self.frame, SamplerConfig(samples=50, seed=9))[1]
        second = uniform_sample(self.frame, SamplerConfig(samples=50, seed=9))[1]
        third = uniform_sample(self.frame, SamplerConfig(samples=50, seed=10))[1]
        np.testing.assert_array_equal(first.data, second.data)
        self.assertFalse(np.array_equal(first.data, third.data))

    def test_bernoulli_mean_count(self):
        """Test that Bernoulli sampling averages the requested count."""
        counts = [bernoulli_sample(self.frame, SamplerConfig(samples=400, seed=s, mode="bernoulli"))[1].count()
                  for s in range(20)]
        self.assertLess(abs(np.mean(counts) - 400), 40)


class TestBand(unittest.TestCase):
    """Test cases for band cropping and band sampling."""

    def setUp(self):
        self.frame = synth_scene(5, 64, 64)

    def test_full_band_is_identity(self):
        """Test that a full-height band leaves the frame unchanged."""
        cropped = band_crop(self.frame, SamplerConfig(mode="band", band_rows=(0, 64)))
        np.testing.assert_array_equal(cropped.valid_gt, self.frame.valid_gt)

    def test_eight_row_band(self):
        """Test cropping an eight-row band."""
        cropped = band_crop(self.frame, SamplerConfig(mode="band", band_rows=(20, 28)))
        self.assertEqual(cropped.valid_count(), 8 * 64)

    def test_default_band_is_middle_quarter(self):
        """Test that the default band is the middle quarter of rows."""
        self.assertEqual(default_band(64), (24, 40))

    def test_empty_band(self):
        """Test that an empty band raises an error."""
        with self.assertRaises(EmptySelectionError):
            band_crop(self.frame, SamplerConfig(mode="band", band_rows=(10, 10)))

    def test_samples_land_inside_band(self):
        """Test that band samples fall inside the band."""
        cfg = SamplerConfig(samples=100, seed=2, mode="band", band_rows=(16, 24))
        scored, _, mask = sample_sparse(self.frame, cfg)
        rows = np.nonzero(mask.data[0, 0])[0]
        self.assertEqual(mask.count(), 100)
        self.assertTrue(((rows >= 16) & (rows < 24)).all())
        self.assertEqual(scored.valid_count(), 8 * 64)


class TestAugment(unittest.TestCase):
    """Test cases for training augmentation."""

    def setUp(self):
        self.frame = synth_scene(8, 32, 32)

    def test_identity_draw(self):
        """Test that identity parameters leave the frame unchanged."""
        out = apply_augment(self.frame, AugmentParams())
        np.testing.assert_array_equal(out.rgb, self.frame.rgb)
        np.testing.assert_array_equal(out.depth_gt, self.frame.depth_gt)

    def test_flip_twice(self):
        """Test that flipping twice restores the frame."""
        flip = AugmentParams(flip=True)
        twice = apply_augment(apply_augment(self.frame, flip), flip)
        np.testing.assert_array_equal(twice.rgb, self.frame.rgb)
        np.testing.assert_array_equal(twice.depth_gt, self.frame.depth_gt)
        np.testing.assert_array_equal(twice.valid_gt, self.frame.valid_gt)

    def test_scale_divides_depth(self):
        """Test that scaling up divides depth by the scale."""
        out = apply_augment(self.frame, AugmentParams(scale=1.25))
        original_values = set(np.unique(self.frame.depth_gt / 1.25).tolist())
        self.assertTrue(set(np.unique(out.depth_gt).tolist()) <= original_values)
        self.assertTrue((out.valid_gt == 1.0).all())

    def test_rotation_invalidates_corners(self):
        """Test that rotation marks the uncovered corners invalid."""
        out = apply_augment(self.frame, AugmentParams(angle=5.0))
        self.assertEqual(out.valid_gt[0, 0, 0], 0.0)
        self.assertEqual(out.depth_gt[0, 0, 0], 0.0)
        self.assertEqual(out.valid_gt[0, 16, 16], 1.0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2 ** 63 - 1))
    def test_samples_never_hit_invalid_ground_truth(self, seed):
        """Test that sparse samples never land on invalid ground truth."""
        out = augment(self.frame, seed)
        self.assertTrue(((out.rgb >= 0) & (out.rgb <= 1)).all())
        cfg = SamplerConfig(samples=min(50, out.valid_count()), seed=seed, mode="band", band_rows=(8, 24))
        cfg.samples = min(cfg.samples, band_crop(out, cfg).valid_count())
        scored, sparse, mask = sample_sparse(out, cfg)
        self.assertFalse(((mask.data[0] > 0) & (scored.valid_gt == 0)).any())
        self.assertTrue((sparse[mask.data[0] > 0] > 0).all())


class TestDataset(unittest.TestCase):
    """Test cases for dataset writing and manifest loading."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _manifest(self, text):
        with open(os.path.join(self.temp_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
            f.write(text)

    def test_split_counts(self):
        """Test the 80/10/10 split sizes."""
        self.assertEqual(split_counts(50), (40, 5, 5))
        self.assertEqual(split_counts(10), (8, 1, 1))

    def test_written_dataset_loads(self):
        """Test that a written dataset loads back frame by frame."""
        write_dataset(self.temp_dir, 50, 16, 16, seed=7)
        refs = dataset_manifest(self.temp_dir)
        self.assertEqual(len(refs), 50)
        splits = [ref.split for ref in refs]
        self.assertEqual((splits.count("train"), splits.count("val"), splits.count("test")), (40, 5, 5))
        frame = refs[0].load()
        original = synth_scene(derive_seed(7, "frame", 0), 16, 16)
        np.testing.assert_array_equal(frame.depth_gt, original.depth_gt.astype(np.float32).astype(np.float64))

    def test_empty_manifest(self):
        """Test that an empty manifest is rejected."""
        self._manifest("")
        self.assertEqual(dataset_manifest(self.temp_dir), [])

    def test_malformed_line_names_line_number(self):
        """Test that a malformed manifest line error names its line."""
        write_dataset(self.temp_dir, 2, 8, 8)
        with open(os.path.join(self.temp_dir, MANIFEST_NAME), "a", encoding="utf-8") as f:
            f.write("broken line\n")
        with self.assertRaises(ManifestError) as ctx:
            dataset_manifest(self.temp_dir)
        self.assertEqual(ctx.exception.line_number, 3)

    def test_duplicate_id(self):
        """Test that a duplicate frame id is rejected."""
        write_dataset(self.temp_dir, 1, 8, 8)
        self._manifest("a\trgb/frame_00000.ppm\tdepth/frame_00000.pfm\ttrain\n" * 2)
        with self.assertRaises(ManifestError):
            dataset_manifest(self.temp_dir)

    def test_missing_file(self):
        """Test that a manifest entry with a missing file is rejected."""
        self._manifest("a\trgb/nope.ppm\tdepth/nope.pfm\ttrain\n")
        with self.assertRaises(ManifestError):
            dataset_manifest(self.temp_dir)

    def test_dimension_mismatch(self):
        """Test that mismatched image and depth sizes are rejected."""
        write_ppm(os.path.join(self.temp_dir, "a.ppm"), np.zeros((3, 8, 8)))
        write_pfm(os.path.join(self.temp_dir, "a.pfm"), np.ones((8, 16)))
        self._manifest("a\ta.ppm\ta.pfm\ttest\n")
        with self.assertRaises(ManifestError):
            dataset_manifest(self.temp_dir)

    def test_same_seed_same_bytes(self):
        """Test that the same seed writes identical files."""
        other = tempfile.mkdtemp()
        try:
            write_dataset(self.temp_dir, 4, 8, 8, seed=7)
            write_dataset(other, 4, 8, 8, seed=7)
            for name in (MANIFEST_NAME, "rgb/frame_00003.ppm", "depth/frame_00003.pfm"):
                with open(os.path.join(self.temp_dir, name), "rb") as a, open(os.path.join(other, name), "rb") as b:
                    self.assertEqual(a.read(), b.read())
        finally:
            shutil.rmtree(other, ignore_errors=True)


if __name__ == '__main__':
    unittest.main()
