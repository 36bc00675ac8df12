"""
Motion Prior Pretraining

Builds the motion prior from clean 3D pose sequences:
- sample_smooth_noise: keyframe Gaussian noise upsampled in time plus a small residual
- mask_sequence: frame-level and joint-level masking followed by smooth noise
- pretrain_loss: mean per-joint position error plus weighted velocity error
- generate_synthetic_motion: rigid random motions so the pipeline runs without mocap licenses
- run_pretraining: the Adam training loop with flip augmentation and checkpoints
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.interpolate import CubicSpline, interp1d
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from motion_prior import MotionPrior, model_dtype, save_checkpoint
from skeleton import H36M_17, PoseSequence, SkeletonTopology, flip_frames

logger = logging.getLogger(__name__)


@dataclass
class MaskSpec:
    """Masking recipe: whole frames first, then individual (frame, joint) cells."""

    frame_mask_ratio: float = 0.10
    joint_mask_ratio: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ('frame_mask_ratio', 'joint_mask_ratio'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.frame_mask_ratio + self.joint_mask_ratio > 1.0 + 1e-12:
            raise ValueError("frame_mask_ratio + joint_mask_ratio must not exceed 1")


@dataclass
class NoiseSpec:
    """Smooth noise recipe: keyframe noise linearly upsampled plus i.i.d. residual."""

    keyframes: int = 27
    residual_sigma: float = 0.002
    keyframe_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.keyframes < 1:
            raise ValueError(f"keyframes must be positive, got {self.keyframes}")
        if self.residual_sigma < 0 or self.keyframe_sigma < 0:
            raise ValueError("noise standard deviations must be nonnegative")


@dataclass
class PretrainConfig:
    """Schedule of the pretraining loop."""

    epochs: int = 90
    learning_rate: float = 0.0005
    batch_size: int = 64
    velocity_weight: float = 20.0
    sequence_length: int = 243
    flip_augment: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ('epochs', 'batch_size', 'sequence_length'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0 or self.velocity_weight < 0:
            raise ValueError("learning_rate and velocity_weight must be nonnegative")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be nonnegative, got {self.checkpoint_every}")


def _generator(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_smooth_noise(num_frames: int, num_joints: int, spec: NoiseSpec,
                        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Draw temporally smooth noise for a sequence.

    Args:
        num_frames: Sequence length T (at least 2)
        num_joints: Joint count J
        spec: Noise recipe
        rng: Random generator; defaults to one seeded with spec.seed

    Returns:
        (T, J, 3) noise in meters
    """
    if num_frames < 2:
        raise ValueError(f"smooth noise needs at least 2 frames, got {num_frames}")
    if spec.keyframes < 2:
        raise ValueError(f"smooth noise needs at least 2 keyframes, got {spec.keyframes}")
    if spec.keyframes > num_frames:
        raise ValueError(f"{spec.keyframes} keyframes exceed the sequence length {num_frames}")
    rng = _generator(spec.seed if rng is None else rng)

    keys = rng.normal(0.0, spec.keyframe_sigma, size=(spec.keyframes, num_joints, 3))
    if spec.keyframes == num_frames:
        noise = keys
    else:
        key_times = np.linspace(0.0, num_frames - 1, spec.keyframes)
        noise = interp1d(key_times, keys, axis=0)(np.arange(num_frames, dtype=np.float64))
    return noise + rng.normal(0.0, spec.residual_sigma, size=(num_frames, num_joints, 3))


def mask_sequence(clean: PoseSequence, mask: MaskSpec, noise: NoiseSpec,
                  rng: Optional[np.random.Generator] = None) -> Tuple[PoseSequence, np.ndarray]:
    """
    Corrupt a clean sequence with masks and smooth noise.

    Args:
        clean: Fully valid sequence
        mask: Masking recipe
        noise: Noise recipe applied to unmasked cells
        rng: Random generator; defaults to one seeded with (mask.seed, noise.seed)

    Returns:
        Tuple of (corrupted sequence, (T, J) boolean map of masked cells)
    """
    if not clean.fully_valid:
        raise ValueError("mask_sequence expects a fully valid clean sequence")
    rng = _generator(np.random.SeedSequence([mask.seed, noise.seed]) if rng is None else rng)
    num_frames, num_joints = clean.num_frames, clean.num_joints

    frame_count = int(math.floor(mask.frame_mask_ratio * num_frames))
    cell_count = int(math.floor(mask.joint_mask_ratio * num_frames * num_joints))
    remaining = (num_frames - frame_count) * num_joints
    if cell_count > remaining:
        raise ValueError(f"joint masking asks for {cell_count} cells but only {remaining} "
                         f"remain after frame masking")

    mask_map = np.zeros((num_frames, num_joints), dtype=bool)
    masked_frames = rng.choice(num_frames, size=frame_count, replace=False)
    mask_map[masked_frames] = True
    open_cells = np.flatnonzero(~mask_map.ravel())
    mask_map.ravel()[rng.choice(open_cells, size=cell_count, replace=False)] = True

    corrupted = np.array(clean.frames)
    if (noise.keyframe_sigma > 0 or noise.residual_sigma > 0) and num_frames >= 2:
        corrupted = corrupted + sample_smooth_noise(num_frames, num_joints, noise, rng)
    corrupted[mask_map] = 0.0
    return clean.replace(frames=corrupted), mask_map


def pretrain_loss(pred: torch.Tensor, target: torch.Tensor,
                  velocity_weight: float = 20.0) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Reconstruction loss of the pretraining stage.

    L = L_3D + velocity_weight * L_vel, where both terms are mean per-joint
    Euclidean distances (of positions and of first differences).

    Args:
        pred: (..., T, J, 3) predictions
        target: Targets of the same shape
        velocity_weight: Weight of the velocity term

    Returns:
        Tuple of (total loss, components {'l3d', 'lvel', 'velocity_defined'})
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    l3d = torch.linalg.vector_norm(pred - target, dim=-1).mean()
    velocity_defined = pred.shape[-3] >= 2
    if velocity_defined:
        pred_vel = pred[..., 1:, :, :] - pred[..., :-1, :, :]
        target_vel = target[..., 1:, :, :] - target[..., :-1, :, :]
        lvel = torch.linalg.vector_norm(pred_vel - target_vel, dim=-1).mean()
    else:
        lvel = pred.new_zeros(())
    total = l3d + velocity_weight * lvel
    return total, {'l3d': float(l3d.detach()), 'lvel': float(lvel.detach()),
                   'velocity_defined': velocity_defined}


# Rest offsets (direction, length in meters) of the h36m17 preset
_H36M_REST = {
    1: ((-1, 0, 0), 0.13), 2: ((0, -1, 0), 0.45), 3: ((0, -1, 0), 0.44),
    4: ((1, 0, 0), 0.13), 5: ((0, -1, 0), 0.45), 6: ((0, -1, 0), 0.44),
    7: ((0, 1, 0), 0.23), 8: ((0, 1, 0), 0.25), 9: ((0, 1, 0), 0.10), 10: ((0, 1, 0), 0.12),
    11: ((1, 0, 0), 0.15), 12: ((0, -1, 0), 0.28), 13: ((0, -1, 0), 0.25),
    14: ((-1, 0, 0), 0.15), 15: ((0, -1, 0), 0.28), 16: ((0, -1, 0), 0.25),
}


def _rest_offsets(topology: SkeletonTopology, rng: np.random.Generator) -> np.ndarray:
    """(J, 3) rest offsets from each joint's parent; left/right pairs share one scale."""
    offsets = np.zeros((topology.joint_count, 3))
    use_template = topology.joint_count == 17 and topology.parent_of == H36M_17.parent_of
    mirror = topology.mirror_index()
    scales: Dict[int, float] = {}
    for child, _ in topology.limbs:
        partner = int(mirror[child])
        if partner in scales:
            scale = scales[partner]
        else:
            scale = rng.uniform(0.9, 1.1)
        scales[child] = scale
        if use_template:
            direction, length = _H36M_REST[child]
            offsets[child] = np.asarray(direction, dtype=np.float64) * length * scale
        else:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            offsets[child] = direction * rng.uniform(0.1, 0.4) * scale
    return offsets


def _smooth_keys(rng: np.random.Generator, num_frames: int, key_count: int,
                 sigma: float, shape: Tuple[int, ...]) -> np.ndarray:
    if num_frames == 1:
        return rng.normal(0.0, sigma, size=(1,) + shape)
    key_times = np.linspace(0.0, num_frames - 1, key_count)
    keys = rng.normal(0.0, sigma, size=(key_count,) + shape)
    return CubicSpline(key_times, keys, axis=0)(np.arange(num_frames, dtype=np.float64))


def _synthesize_one(num_frames: int, topology: SkeletonTopology, fps: float,
                    rng: np.random.Generator) -> np.ndarray:
    offsets = _rest_offsets(topology, rng)
    key_count = max(2, min(num_frames, int(round(num_frames / (0.5 * fps))) + 1))
    num_joints = topology.joint_count

    local_rotvecs = _smooth_keys(rng, num_frames, key_count, 0.35, (num_joints, 3))
    heading = _smooth_keys(rng, num_frames, key_count, 0.6, ())
    local_rotvecs[:, topology.root] = 0.0
    local_rotvecs[:, topology.root, 1] = heading
    root_path = _smooth_keys(rng, num_frames, key_count, 0.15, (3,))
    root_path[:, 1] += 0.9

    local = Rotation.from_rotvec(local_rotvecs.reshape(-1, 3)).as_matrix()
    local = local.reshape(num_frames, num_joints, 3, 3)
    positions = np.zeros((num_frames, num_joints, 3))
    global_rot = np.zeros((num_frames, num_joints, 3, 3))
    for joint in topology.traversal_order():
        parent = topology.parent_of[joint]
        if joint == topology.root:
            positions[:, joint] = root_path
            global_rot[:, joint] = local[:, joint]
            continue
        positions[:, joint] = positions[:, parent] + np.einsum(
            'tij,j->ti', global_rot[:, parent], offsets[joint])
        global_rot[:, joint] = global_rot[:, parent] @ local[:, joint]
    return positions


def generate_synthetic_motion(count: int, num_frames: int,
                              topology: SkeletonTopology = H36M_17, seed: int = 0,
                              fps: float = 25.0) -> List[PoseSequence]:
    """
    Generate rigid random motions by composing joint rotations down the skeleton.

    Limb lengths are drawn once per sequence (left/right symmetric), joint
    angles are drawn at keyframes every half second and spline-interpolated,
    and the root follows a smooth random path around 0.9 m height.

    Args:
        count: Number of sequences
        num_frames: Frames per sequence
        topology: Skeleton to animate
        seed: Base seed; sequence i uses the stream (seed, i)
        fps: Frame rate stored on the sequences

    Returns:
        List of fully valid PoseSequence objects
    """
    if count < 0 or num_frames < 1:
        raise ValueError(f"invalid synthetic motion request: count={count}, frames={num_frames}")
    motions = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        frames = _synthesize_one(num_frames, topology, fps, rng)
        motions.append(PoseSequence.from_array(frames, topology=topology, fps=fps))
    return motions


def _crop(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    if frames.shape[0] <= length:
        return frames
    start = int(rng.integers(0, frames.shape[0] - length + 1))
    return frames[start:start + length]


def _assemble_batch(dataset: Sequence[PoseSequence], indices: np.ndarray, epoch: int,
                    cfg: PretrainConfig, mask: MaskSpec,
                    noise: NoiseSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupted inputs, mask maps and clean targets for one batch."""
    length = min(cfg.sequence_length, min(dataset[i].num_frames for i in indices))
    inputs, masks, targets = [], [], []
    for index in indices:
        rng = np.random.default_rng([cfg.seed, mask.seed, noise.seed, epoch, int(index)])
        clean = dataset[index]
        frames = _crop(np.array(clean.frames), length, rng)
        if cfg.flip_augment and clean.topology.left_right_pairs and rng.random() < 0.5:
            frames = flip_frames(frames, clean.topology)
        target = clean.replace(frames=frames, valid=np.ones(length, dtype=bool))
        corrupted, mask_map = mask_sequence(target, mask, noise, rng)
        inputs.append(corrupted.frames)
        masks.append(mask_map)
        targets.append(target.frames)
    return np.stack(inputs), np.stack(masks), np.stack(targets)


def run_pretraining(model: MotionPrior, dataset: Sequence[PoseSequence], cfg: PretrainConfig,
                    mask: MaskSpec, noise: NoiseSpec,
                    checkpoint_dir: Optional[str] = None,
                    show_progress: bool = False) -> Tuple[MotionPrior, pd.DataFrame]:
    """
    Train the motion prior to reconstruct clean sequences from corrupted ones.

    Args:
        model: Prior to train in place
        dataset: Clean, fully valid sequences no longer than max_frames
        cfg: Training schedule
        mask: Masking recipe
        noise: Noise recipe
        checkpoint_dir: Directory for prior_epochNNN.mpk checkpoints (cfg.checkpoint_every)
        show_progress: Show a tqdm progress bar over epochs

    Returns:
        Tuple of (trained model, history with columns epoch, total, l3d, lvel)
    """
    if len(dataset) == 0:
        raise ValueError("pretraining needs a non-empty dataset")
    for seq in dataset:
        if seq.num_joints != model.config.num_joints:
            raise ValueError(f"dataset sequence has {seq.num_joints} joints, model expects "
                             f"{model.config.num_joints}")
        if not seq.fully_valid:
            raise ValueError("pretraining sequences must be fully valid")
        if min(seq.num_frames, cfg.sequence_length) > model.config.max_frames:
            raise ValueError(f"sequence_length {cfg.sequence_length} exceeds max_frames "
                             f"{model.config.max_frames}")

    torch.manual_seed(cfg.seed)
    dtype = model_dtype(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = []
    model.train()

    epochs = tqdm(range(1, cfg.epochs + 1), desc='pretrain', disable=not show_progress)
    for epoch in epochs:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        totals, l3ds, lvels = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            inputs, masks, targets = _assemble_batch(
                dataset, order[start:start + cfg.batch_size], epoch, cfg, mask, noise)
            pred = model(torch.as_tensor(inputs, dtype=dtype), torch.as_tensor(masks))
            loss, parts = pretrain_loss(pred, torch.as_tensor(targets, dtype=dtype),
                                        cfg.velocity_weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            totals.append(float(loss.detach()))
            l3ds.append(parts['l3d'])
            lvels.append(parts['lvel'])

        row = {'epoch': epoch, 'total': float(np.mean(totals)),
               'l3d': float(np.mean(l3ds)), 'lvel': float(np.mean(lvels))}
        history.append(row)
        epochs.set_postfix(loss=f"{row['total']:.4f}")
        logger.info(f"Epoch {epoch}/{cfg.epochs}: loss {row['total']:.5f} "
                    f"(l3d {row['l3d']:.5f}, lvel {row['lvel']:.5f})")

        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(model, os.path.join(checkpoint_dir, f"prior_epoch{epoch:03d}.mpk"))

    model.eval()
    return model, pd.DataFrame(history, columns=['epoch', 'total', 'l3d', 'lvel'])
