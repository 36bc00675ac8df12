"""
Pose Metrics

Compares predicted and ground-truth sequences, reported in millimeters:
- mpjpe: mean per-joint position error (optionally root-relative)
- pa_mpjpe: MPJPE after Procrustes similarity alignment (per frame or per sequence)
- accel_error: error of second temporal differences (per frame squared, or per second squared)
- evaluate: all of the above in one EvalReport, skipping frames with invalid ground truth
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from skeleton import PoseSequence, frame_difference

logger = logging.getLogger(__name__)

MM_PER_M = 1000.0
REPORT_COLUMNS = ['label', 'mpjpe_mm', 'pa_mpjpe_mm', 'accel_mm', 'frames_evaluated']

Poses = Union[PoseSequence, np.ndarray]


@dataclass(eq=False)
class EvalReport:
    """Metrics of one prediction against its ground truth."""

    mpjpe_mm: float
    pa_mpjpe_mm: float
    accel_mm: float
    per_frame_mpjpe_mm: np.ndarray
    frames_evaluated: int

    def summary(self) -> Dict[str, float]:
        return {'pa_mpjpe_mm': self.pa_mpjpe_mm, 'mpjpe_mm': self.mpjpe_mm,
                'accel_mm': self.accel_mm}

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dictionary; excluded frames appear as null in the per-frame list."""
        per_frame = [None if np.isnan(value) else float(value) for value in self.per_frame_mpjpe_mm]
        return {
            'mpjpe_mm': _json_number(self.mpjpe_mm),
            'pa_mpjpe_mm': _json_number(self.pa_mpjpe_mm),
            'accel_mm': _json_number(self.accel_mm),
            'frames_evaluated': int(self.frames_evaluated),
            'per_frame_mpjpe_mm': per_frame,
        }

    def write_json(self, path: str) -> None:
        with open(path, 'w') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write('\n')

    def csv_row(self, label: str = '') -> pd.DataFrame:
        """One-row table for assembling result tables."""
        return pd.DataFrame([{'label': label, 'mpjpe_mm': self.mpjpe_mm,
                              'pa_mpjpe_mm': self.pa_mpjpe_mm, 'accel_mm': self.accel_mm,
                              'frames_evaluated': self.frames_evaluated}],
                            columns=REPORT_COLUMNS)

    def append_csv(self, path: str, label: str = '') -> None:
        """Append the row to a CSV file, writing the header if the file is new."""
        exists = os.path.exists(path)
        self.csv_row(label).to_csv(path, mode='a', header=not exists, index=False)


def _json_number(value: float) -> Optional[float]:
    return None if np.isnan(value) else float(value)


def _frames(poses: Poses) -> Tuple[np.ndarray, np.ndarray, int]:
    """(frames, valid, root joint) of a sequence or raw array."""
    if isinstance(poses, PoseSequence):
        return np.asarray(poses.frames), np.asarray(poses.valid), poses.topology.root
    frames = np.asarray(poses, dtype=np.float64)
    return frames, np.ones(frames.shape[0], dtype=bool), 0


def _aligned_pair(pred: Poses, gt: Poses) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Frames of both sides plus the mask of frames valid in both."""
    pred_frames, pred_valid, _ = _frames(pred)
    gt_frames, gt_valid, root = _frames(gt)
    if pred_frames.shape != gt_frames.shape:
        raise ValueError(f"shape mismatch: prediction {pred_frames.shape} vs "
                         f"ground truth {gt_frames.shape}")
    missing_pred = gt_valid & ~pred_valid
    if missing_pred.any():
        logger.warning(f"{int(missing_pred.sum())} frame(s) invalid in the prediction are excluded")
    return pred_frames, gt_frames, gt_valid & pred_valid, root


def per_frame_errors(pred: Poses, gt: Poses, root_relative: bool = False) -> np.ndarray:
    """Per-frame MPJPE in mm; frames outside the evaluation mask are NaN."""
    pred_frames, gt_frames, mask, root = _aligned_pair(pred, gt)
    if root_relative:
        pred_frames = pred_frames - pred_frames[:, root:root + 1]
        gt_frames = gt_frames - gt_frames[:, root:root + 1]
    errors = np.full(pred_frames.shape[0], np.nan)
    distances = np.linalg.norm(pred_frames[mask] - gt_frames[mask], axis=-1)
    errors[mask] = distances.mean(axis=-1) * MM_PER_M
    return errors


def mpjpe(pred: Poses, gt: Poses, root_relative: bool = False) -> float:
    """
    Mean per-joint position error.

    Args:
        pred: Predicted sequence (meters)
        gt: Ground truth of the same shape (meters)
        root_relative: Subtract the root joint of each frame before comparing

    Returns:
        Error in millimeters over frames valid in both sequences
    """
    errors = per_frame_errors(pred, gt, root_relative)
    evaluated = errors[~np.isnan(errors)]
    if evaluated.size == 0:
        raise ValueError("no frames to evaluate: ground truth has no valid frame")
    return float(evaluated.mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> Optional[np.ndarray]:
    """
    Similarity-align one set of points to another.

    Rotation from the SVD of the centered cross-covariance with a determinant
    correction against reflections, optimal uniform scale, centroid translation.

    Args:
        pred: (N, 3) points to move
        gt: (N, 3) reference points

    Returns:
        The aligned (N, 3) points, or None if pred has all points coincident
    """
    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    x0 = pred - mu_pred
    y0 = gt - mu_gt
    spread = np.sum(x0 ** 2)
    if spread <= 1e-24:
        return None

    u, s, vt = np.linalg.svd(x0.T @ y0)
    correction = np.ones(3)
    correction[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rotation = (u * correction) @ vt
    scale = np.sum(s * correction) / spread
    return scale * x0 @ rotation + mu_gt


def pa_mpjpe(pred: Poses, gt: Poses, per_frame: bool = True) -> float:
    """
    MPJPE after Procrustes alignment of the prediction to the ground truth.

    Args:
        pred: Predicted sequence (at least 3 joints for a well-posed alignment)
        gt: Ground truth of the same shape
        per_frame: Align each frame separately (default) or the whole sequence at once

    Returns:
        Error in millimeters; degenerate frames are skipped with a warning
    """
    pred_frames, gt_frames, mask, _ = _aligned_pair(pred, gt)
    if not mask.any():
        raise ValueError("no frames to evaluate: ground truth has no valid frame")
    pred_frames, gt_frames = pred_frames[mask], gt_frames[mask]

    if not per_frame:
        num_frames, num_joints = pred_frames.shape[:2]
        aligned = procrustes_align(pred_frames.reshape(-1, 3), gt_frames.reshape(-1, 3))
        if aligned is None:
            raise ValueError("degenerate prediction: every joint of every frame coincides")
        aligned = aligned.reshape(num_frames, num_joints, 3)
        return float(np.linalg.norm(aligned - gt_frames, axis=-1).mean() * MM_PER_M)

    errors = []
    skipped = 0
    for pred_frame, gt_frame in zip(pred_frames, gt_frames):
        aligned = procrustes_align(pred_frame, gt_frame)
        if aligned is None:
            skipped += 1
            continue
        errors.append(np.linalg.norm(aligned - gt_frame, axis=-1).mean())
    if skipped:
        logger.warning(f"Skipped {skipped} degenerate frame(s) in Procrustes alignment")
    if not errors:
        raise ValueError("no frames to evaluate: every frame is degenerate")
    return float(np.mean(errors) * MM_PER_M)


def accel_error(pred: Poses, gt: Poses, fps: Optional[float] = None) -> float:
    """
    Acceleration error between prediction and ground truth.

    Args:
        pred: Predicted sequence with at least 3 frames
        gt: Ground truth of the same shape
        fps: If given, report mm/s^2 instead of mm/frame^2

    Returns:
        Mean norm of the difference of second differences, in millimeters
    """
    pred_frames, gt_frames, mask, _ = _aligned_pair(pred, gt)
    if pred_frames.shape[0] < 3:
        raise ValueError(f"acceleration needs at least 3 frames, got {pred_frames.shape[0]}")
    # A second difference counts only if all three frames are evaluated
    usable = mask[:-2] & mask[1:-1] & mask[2:]
    if not usable.any():
        raise ValueError("no three consecutive evaluated frames for acceleration")
    accel = frame_difference(pred_frames, 2) - frame_difference(gt_frames, 2)
    error = np.linalg.norm(accel[usable], axis=-1).mean() * MM_PER_M
    if fps is not None:
        error *= fps ** 2
    return float(error)


def evaluate(pred: Poses, gt: Poses, root_relative: bool = False,
             fps: Optional[float] = None) -> EvalReport:
    """
    Compute every metric at once.

    Args:
        pred: Predicted sequence
        gt: Ground truth; frames marked invalid are left out of every mean
        root_relative: Root-center frames before MPJPE
        fps: Convert the acceleration error to mm/s^2

    Returns:
        EvalReport (accel_mm is NaN when fewer than 3 consecutive frames are evaluated)
    """
    per_frame = per_frame_errors(pred, gt, root_relative)
    evaluated = ~np.isnan(per_frame)
    if not evaluated.any():
        raise ValueError("no frames to evaluate: ground truth has no valid frame")
    try:
        accel = accel_error(pred, gt, fps)
    except ValueError as e:
        logger.warning(f"Acceleration error unavailable: {e}")
        accel = float('nan')
    return EvalReport(
        mpjpe_mm=float(per_frame[evaluated].mean()),
        pa_mpjpe_mm=pa_mpjpe(pred, gt),
        accel_mm=accel,
        per_frame_mpjpe_mm=per_frame,
        frames_evaluated=int(evaluated.sum()),
    )


def coordinate_errors(pred: Poses, gt: Poses) -> pd.DataFrame:
    """
    Mean absolute per-axis error over joints, frame by frame.

    Args:
        pred: Predicted sequence
        gt: Ground truth of the same shape

    Returns:
        DataFrame with columns frame, err_x_mm, err_y_mm, err_z_mm (NaN on excluded frames)
    """
    pred_frames, gt_frames, mask, _ = _aligned_pair(pred, gt)
    errors = np.abs(pred_frames - gt_frames).mean(axis=1) * MM_PER_M
    errors[~mask] = np.nan
    return pd.DataFrame({'frame': np.arange(pred_frames.shape[0]),
                         'err_x_mm': errors[:, 0], 'err_y_mm': errors[:, 1],
                         'err_z_mm': errors[:, 2]})
