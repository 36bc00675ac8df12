#!/usr/bin/env python3
"""
Unit tests for the occlusion simulator.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from occlusion_sim import (OcclusionSpec, baseline_interpolate, occlude, occlusion_spans,
                           write_occlusion_pair)
from pretrain import generate_synthetic_motion
from pseq_io import read_pseq


class TestOcclusionSpec(unittest.TestCase):
    """Test cases for OcclusionSpec validation."""

    def test_rejects_bad_values(self):
        with self.assertRaises(ValueError):
            OcclusionSpec(span_seconds=4.0, period_seconds=3.2)
        with self.assertRaises(ValueError):
            OcclusionSpec(coverage=1.5)
        with self.assertRaises(ValueError):
            OcclusionSpec(survivor_noise_sigma=-0.1)

    def test_dict_round_trip(self):
        spec = OcclusionSpec(span_seconds=0.4, coverage=0.5, seed=3)
        self.assertEqual(OcclusionSpec.from_dict(spec.to_dict()), spec)
        with self.assertRaises(ValueError):
            OcclusionSpec.from_dict({'span': 1.0})


class TestOcclusion(unittest.TestCase):
    """Test cases for occlude and occlusion_spans."""

    def setUp(self):
        self.gt = generate_synthetic_motion(1, 80, seed=0, fps=25.0)[0]

    def test_full_coverage_span(self):
        occluded = occlude(self.gt, OcclusionSpec())
        invalid = np.flatnonzero(~occluded.valid)
        self.assertEqual(invalid.size, 40)
        self.assertEqual(invalid[-1] - invalid[0], 39)
        np.testing.assert_array_equal(occluded.frames[~occluded.valid], 0.0)
        np.testing.assert_array_equal(occluded.frames[occluded.valid],
                                      self.gt.frames[occluded.valid])
        self.assertEqual(occluded.metadata['occlusion_spans'], [[int(invalid[0]),
                                                                 int(invalid[-1]) + 1]])

    def test_zero_span_is_identity(self):
        occluded = occlude(self.gt, OcclusionSpec(span_seconds=0.0))
        self.assertTrue(occluded.fully_valid)
        np.testing.assert_array_equal(occluded.frames, self.gt.frames)

    def test_span_longer_than_sequence(self):
        short = generate_synthetic_motion(1, 20, seed=0, fps=25.0)[0]
        with self.assertRaises(ValueError):
            occlude(short, OcclusionSpec())

    def test_one_span_per_window(self):
        rng = np.random.default_rng(0)
        spec = OcclusionSpec(span_seconds=0.4, period_seconds=1.0)
        spans = occlusion_spans(100, 25.0, spec, rng)
        self.assertEqual(len(spans), 4)
        for index, (start, end) in enumerate(spans):
            self.assertEqual(end - start, 10)
            self.assertGreaterEqual(start, index * 25)
            self.assertLessEqual(end, (index + 1) * 25)

    def test_invalid_fraction_matches_span_ratio(self):
        gt = generate_synthetic_motion(1, 200, seed=1, fps=25.0)[0]
        spec = OcclusionSpec(span_seconds=0.8, period_seconds=2.0)
        fractions = [1.0 - occlude(gt, OcclusionSpec(**{**spec.to_dict(), 'seed': seed})).valid.mean()
                     for seed in range(30)]
        self.assertAlmostEqual(float(np.mean(fractions)), 0.4, delta=0.01)

    def test_partial_coverage_holds_joints(self):
        spec = OcclusionSpec(coverage=0.5, seed=2)
        occluded = occlude(self.gt, spec)
        self.assertTrue(occluded.fully_valid)
        start, end = occluded.metadata['occlusion_spans'][0]
        changed = ~np.isclose(occluded.frames, self.gt.frames).all(axis=-1)
        self.assertFalse(changed[:start].any())
        self.assertTrue((changed[start:end].sum(axis=1) <= 8).all())
        # A dropped joint repeats its last observed position
        frame, joint = next((f, j) for f, j in np.argwhere(changed)
                            if f > 0 and not changed[f - 1, j])
        np.testing.assert_array_equal(occluded.frames[frame, joint],
                                      occluded.frames[frame - 1, joint])

    def test_survivor_noise_and_dropout(self):
        spec = OcclusionSpec(survivor_noise_sigma=0.01, per_joint_dropout=0.2, seed=4)
        occluded = occlude(self.gt, spec)
        survivors = occluded.valid
        self.assertTrue(survivors.any())
        self.assertGreater(np.abs(occluded.frames[survivors] - self.gt.frames[survivors]).max(), 0)

    def test_deterministic_and_non_mutating(self):
        before = self.gt.frames.copy()
        spec = OcclusionSpec(coverage=0.3, per_joint_dropout=0.1, seed=5)
        first = occlude(self.gt, spec)
        second = occlude(self.gt, spec)
        np.testing.assert_array_equal(first.frames, second.frames)
        np.testing.assert_array_equal(first.valid, second.valid)
        np.testing.assert_array_equal(self.gt.frames, before)

    def test_requires_fully_valid_input(self):
        occluded = occlude(self.gt, OcclusionSpec())
        with self.assertRaises(ValueError):
            occlude(occluded, OcclusionSpec())

    def test_baseline_fills_gap(self):
        occluded = occlude(self.gt, OcclusionSpec())
        filled = baseline_interpolate(occluded)
        self.assertTrue(filled.fully_valid)
        np.testing.assert_array_equal(filled.frames[occluded.valid], self.gt.frames[occluded.valid])


class TestOcclusionFiles(unittest.TestCase):
    """Test cases for write_occlusion_pair."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_writes_pair_and_recipe(self):
        gt = generate_synthetic_motion(1, 80, seed=0, fps=25.0)[0]
        spec = OcclusionSpec(seed=1)
        occluded = occlude(gt, spec)
        prefix = os.path.join(self.temp_dir, 'clip')
        gt_path, occ_path, spec_path = write_occlusion_pair(gt, occluded, spec, prefix)
        np.testing.assert_array_equal(read_pseq(gt_path).frames, gt.frames)
        reread = read_pseq(occ_path)
        np.testing.assert_array_equal(reread.valid, occluded.valid)
        self.assertEqual(reread.metadata['occlusion_spans'], occluded.metadata['occlusion_spans'])
        with open(spec_path) as handle:
            self.assertEqual(OcclusionSpec.from_dict(json.load(handle)), spec)


if __name__ == '__main__':
    unittest.main()
