"""
Test-Time Refinement

Adapts a pretrained motion prior to a single video of noisy 3D poses:
- linear_fill: fills missing detections by linear interpolation/extrapolation (pseudo-labels)
- loss_limb, loss_mpjp, loss_nmpjp, loss_vel: self-supervised losses against the pseudo-labels
- total_loss: the weighted sum used during refinement
- ttt_refine: fine-tunes a private copy of the prior on one video
- run_ablation: prior only, then losses enabled cumulatively
"""

import copy
import logging
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from motion_prior import MotionPrior, model_dtype, windowed_forward
from skeleton import PoseSequence, SkeletonTopology, compute_limb_lengths, frame_difference

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'total', 'lim', 'mpjp', 'nmpjp', 'vel', 'learning_rate']

# Cumulative loss ladder: (setting label, losses enabled)
ABLATION_LADDER = [
    ('prior only', ()),
    ('+mpjp', ('mpjp',)),
    ('+vel', ('mpjp', 'vel')),
    ('+lim', ('mpjp', 'vel', 'lim')),
    ('+nmpjp', ('mpjp', 'vel', 'lim', 'nmpjp')),
]

Poses = Union[PoseSequence, torch.Tensor]


@dataclass
class LossWeights:
    """Weights of the four refinement losses, named per loss."""

    lim: float = 200.0
    mpjp: float = 1.0
    nmpjp: float = 0.5
    vel: float = 20.0

    def __post_init__(self):
        for item in fields(self):
            value = getattr(self, item.name)
            if not value >= 0:
                raise ValueError(f"loss weight '{item.name}' must be nonnegative, got {value}")

    def only(self, enabled: Sequence[str]) -> 'LossWeights':
        """Copy with every loss outside `enabled` switched off."""
        return LossWeights(**{item.name: getattr(self, item.name) if item.name in enabled else 0.0
                              for item in fields(self)})

    def with_overrides(self, text: Optional[str]) -> 'LossWeights':
        """
        Apply overrides written as "lim=200,vel=10".

        Args:
            text: Comma-separated name=value pairs, or None for no change

        Returns:
            New LossWeights with the overrides applied
        """
        if not text:
            return self
        updates = {}
        names = {item.name for item in fields(self)}
        for part in text.split(','):
            if '=' not in part:
                raise ValueError(f"weight override '{part}' is not of the form name=value")
            name, value = (piece.strip() for piece in part.split('=', 1))
            if name not in names:
                raise ValueError(f"unknown loss weight '{name}' (known: {', '.join(sorted(names))})")
            try:
                updates[name] = float(value)
            except ValueError:
                raise ValueError(f"weight '{name}' has non-numeric value '{value}'") from None
        return replace(self, **updates)


@dataclass
class TTTConfig:
    """Schedule of the per-video refinement."""

    epochs: int = 30
    learning_rate: float = 0.0002
    weight_decay: float = 0.01
    lr_decay_per_epoch: float = 0.99
    window: Optional[int] = None
    backbone_lr_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be nonnegative")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError(f"lr_decay_per_epoch must lie in (0, 1], got {self.lr_decay_per_epoch}")
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be positive, got {self.window}")
        if self.backbone_lr_scale < 0:
            raise ValueError(f"backbone_lr_scale must be nonnegative, got {self.backbone_lr_scale}")


def linear_fill(noisy: PoseSequence) -> PoseSequence:
    """
    Fill invalid frames from the valid ones.

    Interior gaps are interpolated between the nearest valid neighbours;
    leading and trailing gaps are extrapolated from the two nearest valid
    frames (held constant when only one frame is valid). Valid frames are
    copied through untouched.

    Args:
        noisy: Sequence with at least one valid frame

    Returns:
        Fully valid sequence
    """
    valid_idx = np.flatnonzero(noisy.valid)
    if valid_idx.size == 0:
        raise ValueError("zero valid frames: nothing to fill from")
    missing = np.flatnonzero(~noisy.valid)
    if missing.size == 0:
        return noisy

    frames = np.array(noisy.frames)
    if valid_idx.size == 1:
        frames[missing] = frames[valid_idx[0]]
    else:
        # Bracketing pair per missing frame; the ends reuse the outermost pair
        left = np.clip(np.searchsorted(valid_idx, missing) - 1, 0, valid_idx.size - 2)
        left_t, right_t = valid_idx[left], valid_idx[left + 1]
        weight = ((missing - left_t) / (right_t - left_t))[:, None, None]
        frames[missing] = frames[left_t] + weight * (frames[right_t] - frames[left_t])
    return noisy.replace(frames=frames, valid=np.ones(noisy.num_frames, dtype=bool))


def _as_tensor(poses: Poses) -> torch.Tensor:
    if isinstance(poses, PoseSequence):
        return torch.from_numpy(np.array(poses.frames))
    return poses


def _pair(pred: Poses, pseudo: Poses) -> Tuple[torch.Tensor, torch.Tensor]:
    pred, pseudo = _as_tensor(pred), _as_tensor(pseudo)
    if pred.shape != pseudo.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs "
                         f"pseudo-labels {tuple(pseudo.shape)}")
    return pred, pseudo.to(pred.dtype)


def loss_limb(pred: Poses, topology: SkeletonTopology) -> torch.Tensor:
    """
    Temporal variance of normalized limb lengths.

    (1/J) times the sum over limbs of the population variance over time.

    Args:
        pred: (T, J, 3) predicted positions
        topology: Skeleton defining the limbs

    Returns:
        Scalar loss (0 with a warning when T < 2)
    """
    pred = _as_tensor(pred)
    if pred.shape[-3] < 2:
        logger.warning("limb-length variance undefined for fewer than 2 frames; using 0")
        return pred.new_zeros(())
    lengths, _ = compute_limb_lengths(pred, topology, normalize=True)
    deviation = lengths - lengths.mean(dim=-2, keepdim=True)
    variance = (deviation ** 2).mean(dim=-2)
    return variance.sum(dim=-1).mean() / topology.joint_count


def loss_mpjp(pred: Poses, pseudo: Poses) -> torch.Tensor:
    """Mean absolute per-coordinate difference between prediction and pseudo-labels."""
    pred, pseudo = _pair(pred, pseudo)
    return (pred - pseudo).abs().mean()


def scale_factor(pred: Poses, pseudo: Poses) -> torch.Tensor:
    """Least-squares scale s minimizing ||s * pred - pseudo||^2."""
    pred, pseudo = _pair(pred, pseudo)
    denominator = (pred * pred).sum()
    if float(denominator.detach()) == 0.0:
        raise ValueError("degenerate prediction: all coordinates are zero, scale undefined")
    return (pseudo * pred).sum() / denominator


def loss_nmpjp(pred: Poses, pseudo: Poses) -> torch.Tensor:
    pred, pseudo = _pair(pred, pseudo)
    return loss_mpjp(scale_factor(pred, pseudo) * pred, pseudo)


def loss_vel(pred: Poses, pseudo: Poses) -> torch.Tensor:
    """
    Mean absolute difference of first temporal differences.

    Args:
        pred: (T, J, 3) predicted positions
        pseudo: Pseudo-labels of the same shape

    Returns:
        Scalar loss averaged over the (T - 1) * J * 3 cells (0 with a warning when T < 2)
    """
    pred, pseudo = _pair(pred, pseudo)
    if pred.shape[-3] < 2:
        logger.warning("velocity loss undefined for fewer than 2 frames; using 0")
        return pred.new_zeros(())
    return (frame_difference(pred) - frame_difference(pseudo)).abs().mean()


_LOSS_TERMS = {
    'lim': lambda pred, pseudo, topology: loss_limb(pred, topology),
    'mpjp': lambda pred, pseudo, topology: loss_mpjp(pred, pseudo),
    'nmpjp': lambda pred, pseudo, topology: loss_nmpjp(pred, pseudo),
    'vel': lambda pred, pseudo, topology: loss_vel(pred, pseudo),
}


def total_loss(pred: Poses, pseudo: Poses, topology: SkeletonTopology,
               weights: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Weighted sum of the four refinement losses.

    Terms with zero weight are still reported but kept out of the graph;
    a zero-weight term that cannot be evaluated is reported as NaN.

    Args:
        pred: (T, J, 3) prediction
        pseudo: Pseudo-labels of the same shape
        topology: Skeleton for the limb term
        weights: Per-loss weights

    Returns:
        Tuple of (total loss tensor, components {'lim', 'mpjp', 'nmpjp', 'vel'})
    """
    pred, pseudo = _pair(pred, pseudo)
    total = (pred * 0.0).sum()
    components: Dict[str, float] = {}
    for name, term in _LOSS_TERMS.items():
        weight = getattr(weights, name)
        if weight > 0:
            value = term(pred, pseudo, topology)
            total = total + weight * value
            components[name] = float(value.detach())
            continue
        with torch.no_grad():
            try:
                components[name] = float(term(pred.detach(), pseudo, topology))
            except ValueError:
                components[name] = float('nan')
    return total, components


def _optimizer_groups(model: MotionPrior, cfg: TTTConfig) -> List[Dict]:
    head_names = set(model.head_parameter_names())
    head, backbone = [], []
    for name, param in model.named_parameters():
        (head if name in head_names else backbone).append(param)
    groups = [{'params': head, 'lr': cfg.learning_rate}]
    if backbone:
        groups.append({'params': backbone, 'lr': cfg.learning_rate * cfg.backbone_lr_scale})
    return groups


def ttt_refine(noisy: PoseSequence, model: MotionPrior, cfg: TTTConfig,
               weights: Optional[LossWeights] = None,
               show_progress: bool = False) -> Tuple[PoseSequence, MotionPrior, pd.DataFrame]:
    """
    Refine one video by fine-tuning a private copy of the motion prior.

    The pseudo-labels are built once with linear_fill and stay frozen. Each
    epoch forwards them through the copy (in non-overlapping windows when
    the video is longer than the prior's max_frames), takes one AdamW step
    on total_loss and decays the learning rate.

    Args:
        noisy: Estimator output with at least one valid frame
        model: Pretrained prior; never modified
        cfg: Refinement schedule
        weights: Loss weights (defaults to LossWeights())
        show_progress: Show a tqdm progress bar over epochs

    Returns:
        Tuple of (refined sequence, adapted model copy, per-epoch loss history)
    """
    weights = weights or LossWeights()
    pseudo = linear_fill(noisy)
    if pseudo.num_joints != model.config.num_joints:
        raise ValueError(f"sequence has {pseudo.num_joints} joints, model expects "
                         f"{model.config.num_joints}")
    window = cfg.window or model.config.max_frames
    if window > model.config.max_frames:
        raise ValueError(f"window {window} exceeds the prior's max_frames {model.config.max_frames}")

    torch.manual_seed(cfg.seed)
    adapted = copy.deepcopy(model)
    target = torch.as_tensor(np.array(pseudo.frames), dtype=model_dtype(adapted))
    history = []

    if cfg.epochs > 0:
        optimizer = torch.optim.AdamW(_optimizer_groups(adapted, cfg),
                                      lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.lr_decay_per_epoch)
        adapted.train()
        epochs = tqdm(range(1, cfg.epochs + 1), desc='refine', disable=not show_progress)
        for epoch in epochs:
            prediction = windowed_forward(adapted, target, window)
            loss, components = total_loss(prediction, target, pseudo.topology, weights)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite refinement loss at epoch {epoch}")
            learning_rate = optimizer.param_groups[0]['lr']
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            history.append({'epoch': epoch, 'total': float(loss.detach()), **components,
                            'learning_rate': learning_rate})
            epochs.set_postfix(loss=f"{float(loss.detach()):.5f}")
            logger.debug(f"Refinement epoch {epoch}/{cfg.epochs}: loss {float(loss.detach()):.6f}")

    adapted.eval()
    with torch.no_grad():
        refined = windowed_forward(adapted, target, window)
    refined_seq = pseudo.replace(frames=refined.double().numpy())
    return refined_seq, adapted, pd.DataFrame(history, columns=HISTORY_COLUMNS)


def is_non_increasing(values: Sequence[float], tolerance: float = 0.02) -> bool:
    """True when every value is at most the previous one plus a relative tolerance."""
    values = list(values)
    return all(later <= earlier * (1.0 + tolerance)
               for earlier, later in zip(values, values[1:]))


def run_ablation(noisy: PoseSequence, gt: PoseSequence, model: MotionPrior, cfg: TTTConfig,
                 weights: Optional[LossWeights] = None,
                 include_baseline: bool = False) -> pd.DataFrame:
    """
    Evaluate the prior alone and with the losses enabled one by one.

    Args:
        noisy: Corrupted input sequence
        gt: Ground truth for evaluation
        model: Pretrained prior
        cfg: Refinement schedule used for every non-prior row
        weights: Weights of the enabled losses (defaults to LossWeights())
        include_baseline: Prepend a row for the linear-fill baseline

    Returns:
        DataFrame with columns setting, pa_mpjpe_mm, mpjpe_mm, accel_mm
    """
    from metrics import evaluate

    weights = weights or LossWeights()
    rows = []
    if include_baseline:
        report = evaluate(linear_fill(noisy), gt)
        rows.append({'setting': 'interpolation', **report.summary()})
    for label, enabled in ABLATION_LADDER:
        run_cfg = cfg if enabled else replace(cfg, epochs=0)
        refined, _, _ = ttt_refine(noisy, model, run_cfg, weights.only(enabled))
        report = evaluate(refined, gt)
        rows.append({'setting': label, **report.summary()})
        logger.info(f"Ablation {label}: MPJPE {report.mpjpe_mm:.2f} mm")
    return pd.DataFrame(rows, columns=['setting', 'pa_mpjpe_mm', 'mpjpe_mm', 'accel_mm'])
