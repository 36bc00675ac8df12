#!/usr/bin/env python3
"""
Pose Refiner

Command-line pipeline for refining 3D human pose sequences:
- synth: generate synthetic rigid motions as PSEQ files
- occlude: build (ground truth, occluded) benchmark pairs
- pretrain: train the motion prior and save a checkpoint
- refine: test-time training on one or more noisy sequences
- eval: MPJPE / PA-MPJPE / acceleration error of a prediction
- ablate: prior only, then each refinement loss enabled in turn
- plot: per-coordinate error curves as CSV and PNG

Every command writes into the output directory (--out, else the
POSE_REFINE_OUTPUT_DIR environment variable, else Outputs/) and appends a
timestamped record of the run to run.log there.

Usage:
    python pose_refiner.py synth --count 64 --frames 48 --fps 25
    python pose_refiner.py pretrain --data Outputs/synth --config toy.json
    python pose_refiner.py refine --checkpoint Outputs/prior.mpk --input clip.occ.pseq
    python pose_refiner.py eval --pred Outputs/refined/clip.refined.pseq --gt clip.gt.pseq
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import torch

from config import RunConfig, load_config, resolve_output_dir
from metrics import EvalReport, REPORT_COLUMNS, coordinate_errors, evaluate
from motion_prior import MotionPrior, load_checkpoint, save_checkpoint
from occlusion_sim import baseline_interpolate, occlude, write_occlusion_pair
from pretrain import generate_synthetic_motion, run_pretraining
from pseq_io import load_pseq_dataset, read_pseq, write_pseq
from skeleton import get_topology
from ttt_refine import LossWeights, is_non_increasing, run_ablation, ttt_refine

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


class UsageError(Exception):
    """Bad command-line usage."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='JSON run configuration')
    common.add_argument('--seed', type=int, help='Global seed overriding the config')
    common.add_argument('--out', type=str, help='Output directory (default: Outputs/)')

    parser = _ArgumentParser(description='Refine 3D pose sequences with a pretrained motion prior')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    synth = commands.add_parser('synth', parents=[common], help='Generate synthetic motions')
    synth.add_argument('--count', type=int, default=64, help='Number of sequences (default: 64)')
    synth.add_argument('--frames', type=int, default=48, help='Frames per sequence (default: 48)')
    synth.add_argument('--fps', type=float, default=25.0, help='Frame rate (default: 25)')
    synth.add_argument('--topology', type=str, help='Preset name or topology JSON file')

    occ = commands.add_parser('occlude', parents=[common], help='Simulate occlusions')
    occ.add_argument('--input', type=str, required=True, help='Ground-truth PSEQ file')
    occ.add_argument('--name', type=str, help='Output name (default: input file stem)')
    occ.add_argument('--span', type=float, help='Occlusion span in seconds')
    occ.add_argument('--period', type=float, help='Occlusion period in seconds')
    occ.add_argument('--coverage', type=float, help='Fraction of joints occluded in a span')
    occ.add_argument('--noise', type=float, help='Survivor noise sigma in meters')
    occ.add_argument('--dropout', type=float, help='Per-joint dropout outside spans')

    pre = commands.add_parser('pretrain', parents=[common], help='Pretrain the motion prior')
    source = pre.add_mutually_exclusive_group(required=True)
    source.add_argument('--data', type=str, help='Directory of clean PSEQ files')
    source.add_argument('--synthetic', type=int, help='Generate this many synthetic motions')
    pre.add_argument('--frames', type=int, default=48,
                     help='Frames per synthetic motion (default: 48)')
    pre.add_argument('--fps', type=float, default=25.0, help='Synthetic frame rate (default: 25)')
    pre.add_argument('--epochs', type=int, help='Override the number of epochs')
    pre.add_argument('--topology', type=str, help='Preset name or topology JSON file')

    refine = commands.add_parser('refine', parents=[common], help='Test-time refinement')
    refine.add_argument('--checkpoint', type=str, required=True, help='Motion prior checkpoint')
    refine.add_argument('--input', type=str, nargs='+', required=True, help='Noisy PSEQ file(s)')
    refine.add_argument('--epochs', type=int, help='Override the number of epochs')
    refine.add_argument('--weights', type=str, help='Loss weight overrides, e.g. "lim=200,vel=10"')
    refine.add_argument('--window', type=int, help='Window length for long sequences')
    refine.add_argument('--scratch', action='store_true',
                        help='Start from a freshly initialised prior instead of the checkpoint')
    refine.add_argument('--workers', type=int, default=1,
                        help='Refine this many files concurrently (default: 1)')

    ev = commands.add_parser('eval', parents=[common], help='Evaluate a prediction')
    ev.add_argument('--pred', type=str, required=True, help='Predicted PSEQ file')
    ev.add_argument('--gt', type=str, required=True, help='Ground-truth PSEQ file')
    ev.add_argument('--baseline', type=str,
                    help='Corrupted PSEQ file to report the interpolation baseline for')
    ev.add_argument('--root-relative', action='store_true', help='Root-center before MPJPE')
    ev.add_argument('--accel-per-second', action='store_true',
                    help='Report acceleration error in mm/s^2')

    ab = commands.add_parser('ablate', parents=[common], help='Loss ablation')
    ab.add_argument('--checkpoint', type=str, required=True, help='Motion prior checkpoint')
    ab.add_argument('--input', type=str, required=True, help='Noisy PSEQ file')
    ab.add_argument('--gt', type=str, required=True, help='Ground-truth PSEQ file')
    ab.add_argument('--epochs', type=int, help='Override the number of epochs')
    ab.add_argument('--weights', type=str, help='Loss weight overrides')
    ab.add_argument('--baseline', action='store_true', help='Add the interpolation baseline row')

    plot = commands.add_parser('plot', parents=[common], help='Per-coordinate error curves')
    plot.add_argument('--pred', type=str, required=True, help='Predicted PSEQ file')
    plot.add_argument('--gt', type=str, required=True, help='Ground-truth PSEQ file')
    plot.add_argument('--baseline', type=str, help='Second prediction drawn for comparison')

    args = parser.parse_args(argv)
    if args.command == 'pretrain' and args.data and args.topology:
        parser.error("argument --topology: not allowed with --data; PSEQ files carry their own "
                     "topology")
    if getattr(args, 'weights', None):
        try:
            LossWeights().with_overrides(args.weights)
        except ValueError as e:
            parser.error(f"argument --weights: {e}")
    return args


def _prepare(args: argparse.Namespace) -> Tuple[RunConfig, str]:
    """Load the config, apply --seed and create the output directory."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if cfg.seed is not None:
        torch.manual_seed(cfg.seed)
    out_dir = resolve_output_dir(args.out, cfg)
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir


def _stem(path: str) -> str:
    name = os.path.basename(path)
    for suffix in ('.pseq', '.occ', '.gt', '.refined'):
        if name.endswith(suffix):
            name = name[:-len(suffix)]
    return name


def _print_report_table(rows: List[Tuple[str, EvalReport]]) -> None:
    print(f"\n{'='*60}")
    print(f"{'Setting':<20}{'PA-MPJPE':>12}{'MPJPE':>12}{'Accel':>12}")
    print(f"{'-'*60}")
    for label, report in rows:
        print(f"{label:<20}{report.pa_mpjpe_mm:>12.2f}{report.mpjpe_mm:>12.2f}"
              f"{report.accel_mm:>12.2f}")
    print(f"{'='*60}")


def cmd_synth(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    topology = get_topology(args.topology or cfg.topology)
    seed = cfg.seed if cfg.seed is not None else 0
    motions = generate_synthetic_motion(args.count, args.frames, topology, seed, args.fps)
    synth_dir = os.path.join(out_dir, 'synth')
    for index, motion in enumerate(motions):
        write_pseq(motion, os.path.join(synth_dir, f"motion_{index:03d}.pseq"))
    print(f"\nGenerated {len(motions)} motions of {args.frames} frames ({topology.name}) "
          f"in {synth_dir}")
    return EXIT_OK


def cmd_occlude(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    overrides = {'span_seconds': args.span, 'period_seconds': args.period,
                 'coverage': args.coverage, 'survivor_noise_sigma': args.noise,
                 'per_joint_dropout': args.dropout}
    spec = replace(cfg.occlusion, **{k: v for k, v in overrides.items() if v is not None})
    gt = read_pseq(args.input)
    occluded = occlude(gt, spec)
    prefix = os.path.join(out_dir, 'occluded', args.name or _stem(args.input))
    os.makedirs(os.path.dirname(prefix), exist_ok=True)
    paths = write_occlusion_pair(gt, occluded, spec, prefix)
    missing = int((~occluded.valid).sum())
    print(f"\nOccluded {missing} of {occluded.num_frames} frames")
    for path in paths:
        print(f"  {path}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    train_cfg = cfg.pretrain if args.epochs is None else replace(cfg.pretrain, epochs=args.epochs)
    if args.data:
        dataset = load_pseq_dataset(args.data)
    else:
        topology = get_topology(args.topology or cfg.topology)
        dataset = generate_synthetic_motion(args.synthetic, args.frames, topology,
                                            train_cfg.seed, args.fps)

    model_cfg = replace(cfg.model, num_joints=dataset[0].num_joints)
    torch.manual_seed(train_cfg.seed)
    model = MotionPrior(model_cfg)
    print(f"\nPretraining on {len(dataset)} sequences for {train_cfg.epochs} epochs")
    model, history = run_pretraining(model, dataset, train_cfg, cfg.mask, cfg.noise,
                                     checkpoint_dir=os.path.join(out_dir, 'checkpoints'),
                                     show_progress=True)

    checkpoint_path = os.path.join(out_dir, 'prior.mpk')
    history_path = os.path.join(out_dir, 'pretrain_history.csv')
    save_checkpoint(model, checkpoint_path)
    history.to_csv(history_path, index=False)
    print(f"Final loss {history['total'].iloc[-1]:.5f} (first epoch {history['total'].iloc[0]:.5f})")
    print(f"Checkpoint saved to {checkpoint_path}")
    print(f"Loss history saved to {history_path}")
    return EXIT_OK


def _refine_one(path: str, model: MotionPrior, cfg: RunConfig, weights: LossWeights,
                out_dir: str) -> Tuple[str, pd.DataFrame]:
    noisy = read_pseq(path)
    refined, _, history = ttt_refine(noisy, model, cfg.ttt, weights)
    refined_path = os.path.join(out_dir, f"{_stem(path)}.refined.pseq")
    write_pseq(refined, refined_path)
    history.to_csv(os.path.join(out_dir, f"{_stem(path)}.history.csv"), index=False)
    logger.info(f"Refined {path} -> {refined_path}")
    return refined_path, history


def cmd_refine(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    if args.epochs is not None:
        cfg.ttt = replace(cfg.ttt, epochs=args.epochs)
    if args.window is not None:
        cfg.ttt = replace(cfg.ttt, window=args.window)
    weights = cfg.weights.with_overrides(args.weights)
    if args.workers < 1:
        raise ValueError(f"--workers must be positive, got {args.workers}")

    model = load_checkpoint(args.checkpoint)
    if args.scratch:
        torch.manual_seed(cfg.ttt.seed)
        model = MotionPrior(model.config).to(next(model.parameters()).dtype)
        print("\nStarting from a freshly initialised prior (--scratch)")

    refined_dir = os.path.join(out_dir, 'refined')
    os.makedirs(refined_dir, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(lambda path: _refine_one(path, model, cfg, weights, refined_dir),
                                args.input))

    print(f"\n{'='*60}")
    print(f"{'Output':<44}{'Final loss':>16}")
    print(f"{'-'*60}")
    for refined_path, history in results:
        final = f"{history['total'].iloc[-1]:.5f}" if len(history) else 'prior only'
        print(f"{os.path.basename(refined_path):<44}{final:>16}")
    print(f"{'='*60}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    pred, gt = read_pseq(args.pred), read_pseq(args.gt)
    fps = gt.fps if args.accel_per_second else None
    report = evaluate(pred, gt, root_relative=args.root_relative, fps=fps)
    rows = [(_stem(args.pred), report)]
    if args.baseline:
        baseline = baseline_interpolate(read_pseq(args.baseline))
        rows.append(('interpolation', evaluate(baseline, gt, root_relative=args.root_relative,
                                               fps=fps)))

    report.write_json(os.path.join(out_dir, 'report.json'))
    table = pd.concat([r.csv_row(label) for label, r in rows], ignore_index=True)
    table[REPORT_COLUMNS].to_csv(os.path.join(out_dir, 'report.csv'), index=False)
    _print_report_table(rows)
    print(f"Frames evaluated: {report.frames_evaluated}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    ttt_cfg = cfg.ttt if args.epochs is None else replace(cfg.ttt, epochs=args.epochs)
    weights = cfg.weights.with_overrides(args.weights)
    model = load_checkpoint(args.checkpoint)
    table = run_ablation(read_pseq(args.input), read_pseq(args.gt), model, ttt_cfg, weights,
                         include_baseline=args.baseline)
    table.to_csv(os.path.join(out_dir, 'ablation.csv'), index=False)

    print(f"\n{'='*60}")
    print(f"{'Setting':<20}{'PA-MPJPE':>12}{'MPJPE':>12}{'Accel':>12}")
    print(f"{'-'*60}")
    for _, row in table.iterrows():
        print(f"{row['setting']:<20}{row['pa_mpjpe_mm']:>12.2f}{row['mpjpe_mm']:>12.2f}"
              f"{row['accel_mm']:>12.2f}")
    print(f"{'='*60}")
    ladder = table[table['setting'] != 'interpolation']['mpjpe_mm']
    trend = 'non-increasing' if is_non_increasing(ladder) else 'NOT non-increasing'
    print(f"MPJPE trend down the ladder: {trend}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace, cfg: RunConfig, out_dir: str) -> int:
    gt = read_pseq(args.gt)
    curves = coordinate_errors(read_pseq(args.pred), gt)
    baseline = coordinate_errors(read_pseq(args.baseline), gt) if args.baseline else None
    table = curves.copy()
    if baseline is not None:
        for axis in 'xyz':
            table[f"baseline_err_{axis}_mm"] = baseline[f"err_{axis}_mm"]
    csv_path = os.path.join(out_dir, 'error_curves.csv')
    table.to_csv(csv_path, index=False)

    fig, axes = plt.subplots(3, 1, figsize=(10, 7), sharex=True)
    for ax, axis in zip(axes, 'xyz'):
        ax.plot(curves['frame'], curves[f"err_{axis}_mm"], label=_stem(args.pred))
        if baseline is not None:
            ax.plot(baseline['frame'], baseline[f"err_{axis}_mm"], linestyle='--',
                    label=_stem(args.baseline))
        ax.set_ylabel(f"{axis} error (mm)")
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc='upper right')
    axes[-1].set_xlabel('frame')
    fig.tight_layout()
    png_path = os.path.join(out_dir, 'error_curves.png')
    fig.savefig(png_path, dpi=100, metadata={'Software': None})
    plt.close(fig)
    print(f"\nError curves saved to {csv_path} and {png_path}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, str], int]] = {
    'synth': cmd_synth,
    'occlude': cmd_occlude,
    'pretrain': cmd_pretrain,
    'refine': cmd_refine,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'plot': cmd_plot,
}


def _attach_handlers(out_dir: str) -> List[logging.Handler]:
    """Timestamped run.log in the output directory plus warnings on stderr."""
    run_log = logging.FileHandler(os.path.join(out_dir, 'run.log'))
    run_log.setFormatter(logging.Formatter(LOG_FORMAT))
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))
    root = logging.getLogger()
    root.addHandler(run_log)
    root.addHandler(console)
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    return [run_log, console]


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:])

    Returns:
        0 on success, 1 on usage errors, 2 on runtime errors
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_USAGE

    handlers: List[logging.Handler] = []
    try:
        cfg, out_dir = _prepare(args)
        handlers = _attach_handlers(out_dir)
        logger.info(f"Command: {' '.join(argv)}")
        status = COMMANDS[args.command](args, cfg, out_dir)
        logger.info(f"Command {args.command} finished with status {status}")
        return status
    except Exception as e:
        logger.error(f"Command {args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()


def main():
    """Entry point for the pose_refiner command."""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
