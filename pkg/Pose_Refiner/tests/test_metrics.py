#!/usr/bin/env python3
"""
Unit tests for the pose metrics.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from metrics import (REPORT_COLUMNS, accel_error, coordinate_errors, evaluate, mpjpe, pa_mpjpe,
                     per_frame_errors, procrustes_align)
from pretrain import generate_synthetic_motion
from skeleton import PoseSequence


class TestMPJPE(unittest.TestCase):
    """Test cases for mpjpe and per_frame_errors."""

    def setUp(self):
        self.gt = generate_synthetic_motion(1, 12, seed=0)[0]

    def test_zero_for_identical(self):
        self.assertEqual(mpjpe(self.gt, self.gt), 0.0)

    def test_one_millimeter_offset(self):
        pred = self.gt.replace(frames=self.gt.frames + np.array([0.001, 0.0, 0.0]))
        self.assertAlmostEqual(mpjpe(pred, self.gt), 1.0, places=9)
        self.assertAlmostEqual(mpjpe(pred, self.gt, root_relative=True), 0.0, places=9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=(3, 4, 3))
        gt = rng.normal(size=(3, 4, 3))
        total = 0.0
        for t in range(3):
            for j in range(4):
                total += np.sqrt(sum((pred[t, j, d] - gt[t, j, d]) ** 2 for d in range(3)))
        self.assertAlmostEqual(mpjpe(pred, gt), total / 12 * 1000.0, places=8)

    def test_invalid_ground_truth_frames_excluded(self):
        frames = np.array(self.gt.frames)
        frames[3] = 0.0
        valid = np.ones(12, dtype=bool)
        valid[3] = False
        gt = self.gt.replace(frames=frames, valid=valid)
        errors = per_frame_errors(self.gt, gt)
        self.assertTrue(np.isnan(errors[3]))
        self.assertEqual(mpjpe(self.gt, gt), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            mpjpe(np.zeros((3, 17, 3)), np.zeros((4, 17, 3)))


class TestProcrustes(unittest.TestCase):
    """Test cases for procrustes_align and pa_mpjpe."""

    def test_similarity_transform_removed(self):
        gt = np.array(generate_synthetic_motion(1, 5, seed=2)[0].frames)
        rotation = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
        pred = 1.7 * gt @ rotation.T + np.array([0.5, -0.2, 2.0])
        self.assertAlmostEqual(pa_mpjpe(pred, gt), 0.0, places=6)
        self.assertGreater(mpjpe(pred, gt), 100.0)

    def test_not_fooled_by_reflection(self):
        gt = np.random.default_rng(3).normal(size=(1, 17, 3))
        mirrored = gt * np.array([-1.0, 1.0, 1.0])
        self.assertGreater(pa_mpjpe(mirrored, gt), 1.0)

    def test_never_worse_than_mpjpe(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            gt = rng.normal(size=(1, 17, 3))
            pred = gt + rng.uniform(0.05, 1.0) * rng.normal(size=(1, 17, 3))
            self.assertLessEqual(pa_mpjpe(pred, gt), mpjpe(pred, gt) + 1e-9)

    def test_matches_numeric_minimum(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            pred = rng.normal(size=(4, 3))
            rotation = Rotation.from_rotvec(0.3 * rng.normal(size=3)).as_matrix()
            gt = 1.2 * pred @ rotation.T + 0.1 * rng.normal(size=(4, 3))

            def squared_error(params):
                moved = params[3] * pred @ Rotation.from_rotvec(params[:3]).as_matrix().T
                return np.sum((moved + params[4:] - gt) ** 2)

            result = minimize(squared_error, x0=np.array([0, 0, 0, 1.0, 0, 0, 0]),
                              method='BFGS', options={'gtol': 1e-12})
            params = result.x
            best = params[3] * pred @ Rotation.from_rotvec(params[:3]).as_matrix().T + params[4:]
            oracle_mm = np.mean(np.linalg.norm(best - gt, axis=-1)) * 1000.0
            self.assertAlmostEqual(pa_mpjpe(pred[None], gt[None]), oracle_mm, delta=1e-3)
            aligned = procrustes_align(pred, gt)
            self.assertLessEqual(np.sum((aligned - gt) ** 2), result.fun + 1e-10)

    def test_degenerate_frame_skipped(self):
        gt = np.random.default_rng(6).normal(size=(2, 17, 3))
        pred = gt.copy()
        pred[0] = 0.0
        self.assertIsNone(procrustes_align(pred[0], gt[0]))
        with self.assertLogs('metrics', level='WARNING'):
            self.assertAlmostEqual(pa_mpjpe(pred, gt), 0.0, places=6)

    def test_sequence_level_alignment(self):
        gt = np.random.default_rng(7).normal(size=(4, 17, 3))
        pred = 2.0 * gt + 1.0
        self.assertAlmostEqual(pa_mpjpe(pred, gt, per_frame=False), 0.0, places=6)


class TestAcceleration(unittest.TestCase):
    """Test cases for accel_error."""

    def setUp(self):
        self.gt = np.array(generate_synthetic_motion(1, 10, seed=8)[0].frames)

    def test_invariant_to_affine_drift(self):
        times = np.arange(10, dtype=np.float64)[:, None, None]
        pred = self.gt + 0.3 + 0.05 * times
        self.assertAlmostEqual(accel_error(pred, self.gt), 0.0, places=8)

    def test_per_second_units(self):
        rng = np.random.default_rng(9)
        pred = self.gt + 0.01 * rng.normal(size=self.gt.shape)
        per_frame = accel_error(pred, self.gt)
        self.assertAlmostEqual(accel_error(pred, self.gt, fps=25.0), per_frame * 625.0, places=6)

    def test_needs_three_frames(self):
        with self.assertRaises(ValueError):
            accel_error(self.gt[:2], self.gt[:2])

    def test_gaps_break_triples(self):
        valid = np.ones(10, dtype=bool)
        valid[1::2] = False
        frames = self.gt.copy()
        frames[~valid] = 0.0
        gt = PoseSequence.from_array(frames, valid=valid)
        with self.assertRaises(ValueError):
            accel_error(self.gt, gt)


class TestEvaluate(unittest.TestCase):
    """Test cases for evaluate and EvalReport."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.gt = generate_synthetic_motion(1, 20, seed=10)[0]
        self.pred = self.gt.replace(frames=self.gt.frames + 0.002)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_report_values(self):
        report = evaluate(self.pred, self.gt)
        self.assertAlmostEqual(report.mpjpe_mm, 2.0 * np.sqrt(3.0), places=6)
        self.assertAlmostEqual(report.pa_mpjpe_mm, 0.0, places=6)
        self.assertAlmostEqual(report.accel_mm, 0.0, places=6)
        self.assertEqual(report.frames_evaluated, 20)
        self.assertEqual(report.per_frame_mpjpe_mm.shape, (20,))

    def test_short_sequence_has_no_acceleration(self):
        gt = self.gt.replace(frames=self.gt.frames[:2], valid=np.ones(2, dtype=bool))
        with self.assertLogs('metrics', level='WARNING'):
            report = evaluate(gt, gt)
        self.assertTrue(np.isnan(report.accel_mm))
        self.assertIsNone(report.to_dict()['accel_mm'])

    def test_json_output(self):
        path = os.path.join(self.temp_dir, 'report.json')
        evaluate(self.pred, self.gt).write_json(path)
        with open(path) as handle:
            data = json.load(handle)
        self.assertEqual(data['frames_evaluated'], 20)
        self.assertEqual(len(data['per_frame_mpjpe_mm']), 20)
        self.assertAlmostEqual(data['mpjpe_mm'], 2.0 * np.sqrt(3.0), places=6)

    def test_csv_rows_append(self):
        path = os.path.join(self.temp_dir, 'report.csv')
        report = evaluate(self.pred, self.gt)
        report.append_csv(path, 'refined')
        report.append_csv(path, 'again')
        table = pd.read_csv(path)
        self.assertEqual(list(table.columns), REPORT_COLUMNS)
        self.assertEqual(list(table['label']), ['refined', 'again'])

    def test_no_valid_ground_truth(self):
        gt = self.gt.replace(frames=np.zeros((20, 17, 3)), valid=np.zeros(20, dtype=bool))
        with self.assertRaises(ValueError):
            evaluate(self.pred, gt)

    def test_coordinate_errors(self):
        table = coordinate_errors(self.pred, self.gt)
        self.assertEqual(list(table.columns), ['frame', 'err_x_mm', 'err_y_mm', 'err_z_mm'])
        np.testing.assert_allclose(table[['err_x_mm', 'err_y_mm', 'err_z_mm']].to_numpy(), 2.0,
                                   atol=1e-9)


if __name__ == '__main__':
    unittest.main()
