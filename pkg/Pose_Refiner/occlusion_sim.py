"""
Occlusion Simulator

Turns clean sequences into benchmark inputs that look like a pose estimator
failing under occlusion: one contiguous occlusion span per period window,
optionally partial (a fraction of joints), plus noise and per-joint dropout
on the frames that survive.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Tuple

import numpy as np
import pandas as pd

from pseq_io import write_pseq
from skeleton import PoseSequence
from ttt_refine import linear_fill

logger = logging.getLogger(__name__)


@dataclass
class OcclusionSpec:
    span_seconds: float = 1.6
    period_seconds: float = 3.2
    coverage: float = 1.0
    survivor_noise_sigma: float = 0.0
    per_joint_dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.span_seconds < 0 or self.period_seconds <= 0:
            raise ValueError("span_seconds must be nonnegative and period_seconds positive")
        if self.span_seconds > self.period_seconds:
            raise ValueError(f"span_seconds {self.span_seconds} exceeds period_seconds "
                             f"{self.period_seconds}")
        for name in ('coverage', 'per_joint_dropout'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.survivor_noise_sigma < 0:
            raise ValueError(f"survivor_noise_sigma must be nonnegative, got {self.survivor_noise_sigma}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OcclusionSpec':
        known = {item.name for item in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown occlusion fields: {sorted(unknown)}")
        return cls(**data)


def _frame_counts(spec: OcclusionSpec, fps: float) -> Tuple[int, int]:
    period = max(1, int(round(spec.period_seconds * fps)))
    span = min(period, int(round(spec.span_seconds * fps)))
    return span, period


def occlusion_spans(num_frames: int, fps: float, spec: OcclusionSpec,
                    rng: np.random.Generator) -> List[Tuple[int, int]]:
    """
    Place one span per period window.

    Args:
        num_frames: Sequence length
        fps: Frame rate converting seconds to frames
        spec: Span and period lengths
        rng: Random generator for the span offsets

    Returns:
        List of [start, end) frame ranges, clipped to the sequence
    """
    span, period = _frame_counts(spec, fps)
    if span > num_frames:
        raise ValueError(f"occlusion span of {span} frames is longer than the sequence "
                         f"({num_frames} frames)")
    if span == 0:
        return []
    spans = []
    for window_start in range(0, num_frames, period):
        start = window_start + int(rng.integers(0, period - span + 1))
        end = min(start + span, num_frames)
        if start < end:
            spans.append((start, end))
    return spans


def _hold_fill(frames: np.ndarray, unobserved: np.ndarray) -> np.ndarray:
    """Replace unobserved (frame, joint) cells by the joint's last observed position."""
    num_frames, num_joints, _ = frames.shape
    table = pd.DataFrame(frames.reshape(num_frames, num_joints * 3))
    table = table.mask(np.repeat(unobserved, 3, axis=1))
    filled = table.ffill().bfill()
    if filled.isna().to_numpy().any():
        logger.warning("Some joints are never observed; their dropped cells are set to 0")
        filled = filled.fillna(0.0)
    return filled.to_numpy().reshape(num_frames, num_joints, 3)


def occlude(gt: PoseSequence, spec: OcclusionSpec) -> PoseSequence:
    """
    Simulate an estimator failing under occlusion.

    Inside each span, coverage 1 makes frames invalid (coordinates zeroed);
    lower coverage drops floor(coverage * J) random joints per frame and holds
    their last observed position. Outside the spans, survivor noise is added
    and joints drop out independently with probability per_joint_dropout.

    Args:
        gt: Fully valid ground-truth sequence
        spec: Occlusion recipe

    Returns:
        The corrupted sequence; spans are recorded in metadata['occlusion_spans']
    """
    if not gt.fully_valid:
        raise ValueError("occlude expects a fully valid ground-truth sequence")
    rng = np.random.default_rng(spec.seed)
    num_frames, num_joints = gt.num_frames, gt.num_joints
    spans = occlusion_spans(num_frames, gt.fps, spec, rng)

    frames = np.array(gt.frames)
    valid = np.ones(num_frames, dtype=bool)
    in_span = np.zeros(num_frames, dtype=bool)
    for start, end in spans:
        in_span[start:end] = True
    dropped = np.zeros((num_frames, num_joints), dtype=bool)

    if spec.coverage >= 1.0:
        valid[in_span] = False
    else:
        drop_count = int(math.floor(spec.coverage * num_joints))
        for frame in np.flatnonzero(in_span):
            dropped[frame, rng.choice(num_joints, size=drop_count, replace=False)] = True

    survivors = ~in_span
    if spec.survivor_noise_sigma > 0:
        noise = rng.normal(0.0, spec.survivor_noise_sigma, size=frames.shape)
        frames[survivors] += noise[survivors]
    if spec.per_joint_dropout > 0:
        dropout = rng.random((num_frames, num_joints)) < spec.per_joint_dropout
        dropped |= dropout & survivors[:, None]
        lost = dropped.all(axis=1) & survivors
        valid[lost] = False

    dropped &= valid[:, None]
    if dropped.any():
        kept = frames.copy()
        kept[~valid] = np.nan
        unobserved = dropped | ~valid[:, None]
        frames = np.where(dropped[..., None], _hold_fill(kept, unobserved), frames)
    frames[~valid] = 0.0

    occluded = gt.replace(frames=frames, valid=valid)
    occluded.metadata['occlusion_spans'] = [[int(s), int(e)] for s, e in spans]
    logger.info(f"Occluded {len(spans)} span(s); {int((~valid).sum())} of {num_frames} "
                f"frames invalid")
    return occluded


def baseline_interpolate(corrupted: PoseSequence) -> PoseSequence:
    """Linear interpolation/extrapolation baseline (same as the refinement pseudo-labels)."""
    return linear_fill(corrupted)


def write_occlusion_pair(gt: PoseSequence, occluded: PoseSequence, spec: OcclusionSpec,
                         prefix: str) -> Tuple[str, str, str]:
    """
    Write the benchmark pair and the occlusion recipe it was built with.

    Args:
        gt: Ground truth
        occluded: Output of occlude
        spec: Recipe echoed for provenance
        prefix: Path prefix; files get .gt.pseq, .occ.pseq and .spec.json suffixes

    Returns:
        Tuple of the three paths written
    """
    gt_path, occ_path, spec_path = (f"{prefix}.gt.pseq", f"{prefix}.occ.pseq",
                                    f"{prefix}.spec.json")
    write_pseq(gt, gt_path)
    write_pseq(occluded, occ_path)
    with open(spec_path, 'w') as handle:
        json.dump(spec.to_dict(), handle, indent=2, sort_keys=True)
        handle.write('\n')
    return gt_path, occ_path, spec_path
