#!/usr/bin/env python3
"""
End-to-end tests of the pose_refiner command line.

Runs the whole pipeline (synth, pretrain, occlude, refine, eval, ablate,
plot) on a toy configuration in a temporary directory.
"""

import io
import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from metrics import accel_error, mpjpe
from motion_prior import MotionPrior, MotionPriorConfig, dual_stream_forward, load_checkpoint
from occlusion_sim import OcclusionSpec, baseline_interpolate, occlude
from pose_refiner import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, cli_main
from pretrain import MaskSpec, NoiseSpec, PretrainConfig, generate_synthetic_motion, run_pretraining
from pseq_io import read_pseq
from ttt_refine import (ABLATION_LADDER, TTTConfig, is_non_increasing, linear_fill, run_ablation,
                        ttt_refine)

SLOW_TESTS_ENV = 'POSE_REFINE_SLOW_TESTS'

TOY_CONFIG = {
    'seed': 7,
    'model': {'depth': 1, 'heads': 2, 'feature_dim': 16, 'embed_dim': 16, 'max_frames': 24},
    'pretrain': {'epochs': 2, 'batch_size': 4, 'sequence_length': 24},
    'noise': {'keyframes': 8},
    'ttt': {'epochs': 3, 'learning_rate': 0.001},
    'occlusion': {'span_seconds': 0.4, 'period_seconds': 0.96},
}


def run(*argv):
    """Run the CLI with console output captured."""
    with patch('sys.stdout', new_callable=io.StringIO) as out, \
            patch('sys.stderr', new_callable=io.StringIO) as err:
        status = cli_main([str(arg) for arg in argv])
    return status, out.getvalue(), err.getvalue()


class TestPipeline(unittest.TestCase):
    """Test cases for the full command-line pipeline."""

    @classmethod
    def setUpClass(cls):
        cls.temp_dir = tempfile.mkdtemp()
        cls.config = os.path.join(cls.temp_dir, 'toy.json')
        with open(cls.config, 'w') as handle:
            json.dump(TOY_CONFIG, handle)
        cls.out = os.path.join(cls.temp_dir, 'out')

        status, _, err = run('synth', '--count', 8, '--frames', 24, '--config', cls.config,
                             '--out', cls.out)
        assert status == EXIT_OK, err
        status, _, err = run('pretrain', '--data', os.path.join(cls.out, 'synth'),
                             '--config', cls.config, '--out', cls.out)
        assert status == EXIT_OK, err
        cls.gt_source = os.path.join(cls.out, 'synth', 'motion_000.pseq')
        status, _, err = run('occlude', '--input', cls.gt_source, '--name', 'clip',
                             '--config', cls.config, '--out', cls.out)
        assert status == EXIT_OK, err
        cls.checkpoint = os.path.join(cls.out, 'prior.mpk')
        cls.gt = os.path.join(cls.out, 'occluded', 'clip.gt.pseq')
        cls.occ = os.path.join(cls.out, 'occluded', 'clip.occ.pseq')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.temp_dir, ignore_errors=True)

    def test_pretrain_outputs(self):
        history = pd.read_csv(os.path.join(self.out, 'pretrain_history.csv'))
        self.assertEqual(list(history.columns), ['epoch', 'total', 'l3d', 'lvel'])
        self.assertEqual(len(history), 2)
        self.assertEqual(load_checkpoint(self.checkpoint).config.depth, 1)
        with open(os.path.join(self.out, 'run.log')) as handle:
            self.assertIn('pretrain', handle.read())

    def test_occluded_pair(self):
        occluded = read_pseq(self.occ)
        self.assertEqual(int((~occluded.valid).sum()), 10)
        np.testing.assert_array_equal(read_pseq(self.gt).frames, read_pseq(self.gt_source).frames)

    def test_refine_eval_and_plot(self):
        out = os.path.join(self.temp_dir, 'refine_run')
        status, _, err = run('refine', '--checkpoint', self.checkpoint, '--input', self.occ,
                             '--config', self.config, '--out', out)
        self.assertEqual(status, EXIT_OK, err)
        refined_path = os.path.join(out, 'refined', 'clip.refined.pseq')
        refined = read_pseq(refined_path)
        self.assertTrue(refined.fully_valid)
        self.assertTrue(np.isfinite(refined.frames).all())
        history = pd.read_csv(os.path.join(out, 'refined', 'clip.history.csv'))
        self.assertEqual(len(history), 3)

        status, stdout, err = run('eval', '--pred', refined_path, '--gt', self.gt,
                                  '--baseline', self.occ, '--out', out)
        self.assertEqual(status, EXIT_OK, err)
        self.assertIn('interpolation', stdout)
        table = pd.read_csv(os.path.join(out, 'report.csv'))
        self.assertEqual(list(table['label']), ['clip', 'interpolation'])
        with open(os.path.join(out, 'report.json')) as handle:
            self.assertEqual(json.load(handle)['frames_evaluated'], 24)

        status, _, err = run('plot', '--pred', refined_path, '--gt', self.gt,
                             '--baseline', self.occ, '--out', out)
        self.assertEqual(status, EXIT_OK, err)
        curves = pd.read_csv(os.path.join(out, 'error_curves.csv'))
        self.assertIn('baseline_err_x_mm', curves.columns)
        self.assertTrue(os.path.exists(os.path.join(out, 'error_curves.png')))

    def test_zero_epochs_equals_prior_forward(self):
        out = os.path.join(self.temp_dir, 'prior_only')
        status, _, err = run('refine', '--checkpoint', self.checkpoint, '--input', self.occ,
                             '--epochs', 0, '--out', out)
        self.assertEqual(status, EXIT_OK, err)
        refined = read_pseq(os.path.join(out, 'refined', 'clip.refined.pseq'))
        expected = dual_stream_forward(load_checkpoint(self.checkpoint),
                                       linear_fill(read_pseq(self.occ)))
        np.testing.assert_array_equal(refined.frames, expected.frames)

    def test_refinement_is_reproducible(self):
        outputs = []
        for name in ('first', 'second'):
            out = os.path.join(self.temp_dir, name)
            status, _, err = run('refine', '--checkpoint', self.checkpoint, '--input', self.occ,
                                 '--config', self.config, '--out', out)
            self.assertEqual(status, EXIT_OK, err)
            with open(os.path.join(out, 'refined', 'clip.refined.pseq'), 'rb') as handle:
                outputs.append(handle.read())
        self.assertEqual(outputs[0], outputs[1])

    def test_ablation(self):
        out = os.path.join(self.temp_dir, 'ablation')
        status, stdout, err = run('ablate', '--checkpoint', self.checkpoint, '--input', self.occ,
                                  '--gt', self.gt, '--epochs', 1, '--baseline',
                                  '--config', self.config, '--out', out)
        self.assertEqual(status, EXIT_OK, err)
        self.assertIn('MPJPE trend down the ladder', stdout)
        table = pd.read_csv(os.path.join(out, 'ablation.csv'))
        self.assertEqual(list(table['setting']),
                         ['interpolation', 'prior only', '+mpjp', '+vel', '+lim', '+nmpjp'])


class TestExitCodes(unittest.TestCase):
    """Test cases for exit codes and error reporting."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_eval_against_itself(self):
        status, _, err = run('synth', '--count', 1, '--frames', 10, '--out', self.temp_dir)
        self.assertEqual(status, EXIT_OK, err)
        path = os.path.join(self.temp_dir, 'synth', 'motion_000.pseq')
        status, _, err = run('eval', '--pred', path, '--gt', path, '--out', self.temp_dir)
        self.assertEqual(status, EXIT_OK, err)
        with open(os.path.join(self.temp_dir, 'report.json')) as handle:
            report = json.load(handle)
        self.assertEqual(report['mpjpe_mm'], 0.0)
        self.assertAlmostEqual(report['pa_mpjpe_mm'], 0.0, places=6)
        self.assertEqual(report['accel_mm'], 0.0)

    def test_usage_errors(self):
        status, _, err = run('eval', '--bogus', '--out', self.temp_dir)
        self.assertEqual(status, EXIT_USAGE)
        self.assertIn('Error:', err)
        self.assertEqual(run()[0], EXIT_USAGE)
        status, _, _ = run('refine', '--checkpoint', 'p.mpk', '--input', 'x.pseq',
                           '--weights', 'speed=3', '--out', self.temp_dir)
        self.assertEqual(status, EXIT_USAGE)

    def test_topology_rejected_with_pseq_data(self):
        status, _, err = run('pretrain', '--data', self.temp_dir, '--topology', 'h36m17',
                             '--out', self.temp_dir)
        self.assertEqual(status, EXIT_USAGE)
        self.assertIn('--topology', err)
        self.assertFalse(os.path.exists(os.path.join(self.temp_dir, 'prior.mpk')))

    def test_help_exits_cleanly(self):
        self.assertEqual(run('--help')[0], EXIT_OK)

    def test_missing_file_is_runtime_error(self):
        missing = os.path.join(self.temp_dir, 'missing.pseq')
        status, _, err = run('eval', '--pred', missing, '--gt', missing, '--out', self.temp_dir)
        self.assertEqual(status, EXIT_RUNTIME)
        self.assertIn('Error:', err)

    def test_output_directory_from_environment(self):
        target = os.path.join(self.temp_dir, 'env_out')
        with patch.dict(os.environ, {'POSE_REFINE_OUTPUT_DIR': target}):
            status, _, err = run('synth', '--count', 1, '--frames', 5)
        self.assertEqual(status, EXIT_OK, err)
        self.assertTrue(os.path.exists(os.path.join(target, 'synth', 'motion_000.pseq')))
        self.assertTrue(os.path.exists(os.path.join(target, 'run.log')))


@unittest.skipUnless(os.environ.get(SLOW_TESTS_ENV),
                     f'slow; run with run_tests.py --slow or {SLOW_TESTS_ENV}=1')
class TestToyBenchmark(unittest.TestCase):
    """Refinement against the interpolation baseline on a toy benchmark."""

    @classmethod
    def setUpClass(cls):
        motions = generate_synthetic_motion(65, 48, seed=0, fps=25.0)
        config = MotionPriorConfig(depth=2, heads=4, feature_dim=64, embed_dim=64, max_frames=48)
        torch.manual_seed(0)
        cls.model, _ = run_pretraining(MotionPrior(config), motions[:64],
                                       PretrainConfig(epochs=30, batch_size=8,
                                                      sequence_length=48, learning_rate=1e-3),
                                       MaskSpec(), NoiseSpec(keyframes=8))
        cls.gt = motions[64]
        spec = OcclusionSpec(span_seconds=0.768, period_seconds=1.92, survivor_noise_sigma=0.02,
                             seed=1)
        cls.occluded = occlude(cls.gt, spec)
        cls.table = run_ablation(cls.occluded, cls.gt, cls.model, TTTConfig(),
                                 include_baseline=True).set_index('setting')
        print(f"\nToy benchmark:\n{cls.table.round(2).to_string()}")

    def test_occlusion_covers_forty_percent(self):
        self.assertEqual(int((~self.occluded.valid).sum()), 19)

    def test_refinement_beats_interpolation(self):
        refined, _, _ = ttt_refine(self.occluded, self.model, TTTConfig())
        baseline = baseline_interpolate(self.occluded)
        self.assertLess(mpjpe(refined, self.gt), mpjpe(baseline, self.gt))
        self.assertLess(accel_error(refined, self.gt), accel_error(baseline, self.gt))

    def test_ablation_mpjpe_non_increasing(self):
        ladder = self.table.loc[[label for label, _ in ABLATION_LADDER], 'mpjpe_mm']
        self.assertTrue(is_non_increasing(ladder), f"MPJPE down the ladder: {list(ladder)}")
        self.assertLess(ladder.iloc[-1], ladder.iloc[0])


if __name__ == '__main__':
    unittest.main()
