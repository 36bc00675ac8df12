"""
Skeleton and Pose Sequence Model

This module defines the data model every other part of the refiner consumes:
- SkeletonTopology: joint count, parent indices, names and left/right pairs
- PoseSequence: a T x J x 3 trajectory of joint positions (meters) with per-frame validity
- LimbLengthMatrix: per-frame limb lengths, optionally normalized

It also provides the kinematic primitives (limb lengths, finite differences,
horizontal flips). Topologies can be loaded from JSON files or from the bundled
"h36m17" preset.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

ROOT_PARENT = -1


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree of a skeleton.

    Attributes:
        joint_count: Number of joints J
        parent_of: Parent index of every joint; the root uses ROOT_PARENT
        joint_names: Optional joint names, one per joint
        left_right_pairs: (left, right) joint index pairs swapped by horizontal flips
        lateral_axis: Coordinate axis negated by horizontal flips (default x)
        name: Preset or file name of the topology
    """

    joint_count: int
    parent_of: Tuple[int, ...]
    joint_names: Optional[Tuple[str, ...]] = None
    left_right_pairs: Tuple[Tuple[int, int], ...] = ()
    lateral_axis: int = 0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, 'parent_of', tuple(int(p) for p in self.parent_of))
        object.__setattr__(self, 'left_right_pairs',
                           tuple((int(a), int(b)) for a, b in self.left_right_pairs))
        if self.joint_names is not None:
            object.__setattr__(self, 'joint_names', tuple(str(n) for n in self.joint_names))
        self._validate()

    def _validate(self) -> None:
        if self.joint_count < 1:
            raise ValueError(f"joint_count must be positive, got {self.joint_count}")
        if len(self.parent_of) != self.joint_count:
            raise ValueError(f"parent_of has {len(self.parent_of)} entries for "
                             f"{self.joint_count} joints")
        if self.joint_names is not None and len(self.joint_names) != self.joint_count:
            raise ValueError(f"joint_names has {len(self.joint_names)} entries for "
                             f"{self.joint_count} joints")
        if self.lateral_axis not in (0, 1, 2):
            raise ValueError(f"lateral_axis must be 0, 1 or 2, got {self.lateral_axis}")

        roots = [j for j, p in enumerate(self.parent_of) if p == ROOT_PARENT]
        if len(roots) != 1:
            raise ValueError(f"topology needs exactly one root, found {len(roots)}")
        for joint, parent in enumerate(self.parent_of):
            if parent == ROOT_PARENT:
                continue
            if not 0 <= parent < self.joint_count or parent == joint:
                raise ValueError(f"joint {joint} has invalid parent {parent}")

        # Every joint must reach the root without revisiting a joint
        for joint in range(self.joint_count):
            seen = set()
            current = joint
            while current != ROOT_PARENT:
                if current in seen:
                    raise ValueError(f"parent graph has a cycle through joint {joint}")
                seen.add(current)
                current = self.parent_of[current]

        used = set()
        for left, right in self.left_right_pairs:
            for joint in (left, right):
                if not 0 <= joint < self.joint_count:
                    raise ValueError(f"left/right pair ({left}, {right}) references "
                                     f"unknown joint {joint}")
            if left == right:
                raise ValueError(f"left/right pair ({left}, {right}) pairs a joint with itself")
            if left in used or right in used:
                raise ValueError(f"left/right pair ({left}, {right}) overlaps another pair")
            used.update((left, right))

    @property
    def root(self) -> int:
        """Index of the root joint."""
        return self.parent_of.index(ROOT_PARENT)

    @property
    def limbs(self) -> List[Tuple[int, int]]:
        """(child, parent) pairs in ascending child-joint order; J - 1 entries."""
        return [(child, parent) for child, parent in enumerate(self.parent_of)
                if parent != ROOT_PARENT]

    @property
    def limb_count(self) -> int:
        return self.joint_count - 1

    def traversal_order(self) -> List[int]:
        """Joints ordered so that every parent precedes its children."""
        children: Dict[int, List[int]] = {j: [] for j in range(self.joint_count)}
        for child, parent in self.limbs:
            children[parent].append(child)
        order, stack = [], [self.root]
        while stack:
            joint = stack.pop()
            order.append(joint)
            stack.extend(reversed(children[joint]))
        return order

    def mirror_index(self) -> np.ndarray:
        """Permutation mapping every joint to its left/right counterpart (or itself)."""
        index = np.arange(self.joint_count)
        for left, right in self.left_right_pairs:
            index[left], index[right] = right, left
        return index

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            'name': self.name,
            'joint_count': self.joint_count,
            'parent_of': list(self.parent_of),
        }
        if self.joint_names is not None:
            data['joint_names'] = list(self.joint_names)
        data['left_right_pairs'] = [list(pair) for pair in self.left_right_pairs]
        data['lateral_axis'] = self.lateral_axis
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SkeletonTopology':
        known = {'name', 'joint_count', 'parent_of', 'joint_names',
                 'left_right_pairs', 'lateral_axis'}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown topology fields: {sorted(unknown)}")
        if 'joint_count' not in data or 'parent_of' not in data:
            raise ValueError("topology requires 'joint_count' and 'parent_of'")
        return cls(
            joint_count=int(data['joint_count']),
            parent_of=tuple(data['parent_of']),
            joint_names=tuple(data['joint_names']) if data.get('joint_names') else None,
            left_right_pairs=tuple(tuple(pair) for pair in data.get('left_right_pairs', [])),
            lateral_axis=int(data.get('lateral_axis', 0)),
            name=str(data.get('name', 'custom')),
        )


# 17-joint Human3.6M skeleton, pelvis root, y up, subject's left on +x
H36M_JOINT_NAMES = (
    'pelvis', 'r_hip', 'r_knee', 'r_ankle', 'l_hip', 'l_knee', 'l_ankle',
    'spine', 'thorax', 'neck', 'head',
    'l_shoulder', 'l_elbow', 'l_wrist', 'r_shoulder', 'r_elbow', 'r_wrist',
)

H36M_17 = SkeletonTopology(
    joint_count=17,
    parent_of=(-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
    joint_names=H36M_JOINT_NAMES,
    left_right_pairs=((4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)),
    lateral_axis=0,
    name='h36m17',
)

TOPOLOGY_PRESETS = {'h36m17': H36M_17}


def load_topology(path: str) -> SkeletonTopology:
    """
    Load a topology from a JSON file.

    Args:
        path: Path to the topology file

    Returns:
        The parsed SkeletonTopology
    """
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    topology = SkeletonTopology.from_dict(data)
    if topology.name == 'custom':
        topology = SkeletonTopology.from_dict({**data, 'name': os.path.basename(path)})
    return topology


def save_topology(topology: SkeletonTopology, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(topology.to_dict(), f, indent=2)
        f.write('\n')


def get_topology(name_or_path: Union[str, SkeletonTopology]) -> SkeletonTopology:
    """Resolve a preset name ("h36m17") or a topology file path."""
    if isinstance(name_or_path, SkeletonTopology):
        return name_or_path
    if name_or_path in TOPOLOGY_PRESETS:
        return TOPOLOGY_PRESETS[name_or_path]
    if os.path.exists(name_or_path):
        return load_topology(name_or_path)
    raise ValueError(f"unknown topology '{name_or_path}' "
                     f"(presets: {', '.join(sorted(TOPOLOGY_PRESETS))})")


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """A T x J x 3 joint trajectory in meters with per-frame validity.

    Arrays are copied and made read-only on construction, so a PoseSequence
    never changes after it is built.
    """

    frames: np.ndarray
    fps: float
    valid: np.ndarray
    topology: SkeletonTopology
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"frames must have shape (T, J, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a pose sequence needs at least one frame")
        if frames.shape[1] != self.topology.joint_count:
            raise ValueError(f"frames have {frames.shape[1]} joints but the topology "
                             f"declares {self.topology.joint_count}")
        if valid.shape != (frames.shape[0],):
            raise ValueError(f"valid has shape {valid.shape}, expected ({frames.shape[0]},)")
        if not np.isfinite(frames[valid]).all():
            raise ValueError("non-finite coordinates on valid frames")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        frames.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, 'frames', frames)
        object.__setattr__(self, 'valid', valid)
        object.__setattr__(self, 'fps', float(self.fps))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    @property
    def fully_valid(self) -> bool:
        return bool(self.valid.all())

    def replace(self, frames: Optional[np.ndarray] = None,
                valid: Optional[np.ndarray] = None) -> 'PoseSequence':
        """Copy of this sequence with new frames and/or validity."""
        return PoseSequence(
            frames=self.frames if frames is None else frames,
            fps=self.fps,
            valid=self.valid if valid is None else valid,
            topology=self.topology,
            metadata=dict(self.metadata),
        )

    @classmethod
    def from_array(cls, frames: np.ndarray, topology: SkeletonTopology = H36M_17,
                   fps: float = 50.0, valid: Optional[np.ndarray] = None) -> 'PoseSequence':
        """Build a sequence from a raw array; all frames valid unless told otherwise."""
        frames = np.asarray(frames, dtype=np.float64)
        if valid is None:
            valid = np.ones(frames.shape[0], dtype=bool)
        return cls(frames=frames, fps=fps, valid=valid, topology=topology)


@dataclass(frozen=True, eq=False)
class LimbLengthMatrix:
    """T x (J - 1) limb lengths; columns follow SkeletonTopology.limbs."""

    lengths: np.ndarray
    normalization_constant: float = 1.0


def compute_limb_lengths(frames: torch.Tensor, topology: SkeletonTopology,
                         normalize: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Differentiable limb lengths for a (..., T, J, 3) tensor.

    Args:
        frames: Joint positions with the time axis second to last but one
        topology: Skeleton whose limbs are measured
        normalize: Divide by the sequence-mean total skeleton length

    Returns:
        Tuple of (lengths of shape (..., T, J - 1), normalization constant of shape (...))
    """
    limbs = topology.limbs
    if not limbs:
        raise ValueError("topology has no limbs (single-joint skeleton)")
    children = torch.tensor([c for c, _ in limbs], device=frames.device)
    parents = torch.tensor([p for _, p in limbs], device=frames.device)
    offsets = frames.index_select(-2, children) - frames.index_select(-2, parents)
    lengths = torch.linalg.vector_norm(offsets, dim=-1)
    if not normalize:
        return lengths, torch.ones(lengths.shape[:-2], dtype=lengths.dtype, device=lengths.device)

    constant = lengths.sum(dim=-1).mean(dim=-1)
    if bool((constant <= 0).any()):
        raise ValueError("zero normalization constant: all joints coincide in every frame")
    return lengths / constant[..., None, None], constant


def limb_lengths(seq: PoseSequence, normalize: bool = False) -> LimbLengthMatrix:
    """
    Per-frame limb lengths of a pose sequence.

    Args:
        seq: Pose sequence; every frame is measured, so fill gaps first
        normalize: Divide by the sequence-mean total skeleton length

    Returns:
        LimbLengthMatrix with one row per frame
    """
    lengths, constant = compute_limb_lengths(torch.from_numpy(np.array(seq.frames)),
                                             seq.topology, normalize)
    return LimbLengthMatrix(lengths=lengths.numpy(), normalization_constant=float(constant))


def frame_difference(x, order: int = 1):
    """Finite difference along axis 0 of a numpy array or torch tensor."""
    for _ in range(order):
        x = x[1:] - x[:-1]
    return x


def finite_difference(seq: Union[PoseSequence, np.ndarray], order: int = 1) -> np.ndarray:
    """
    Frame-to-frame differences of a pose sequence.

    Args:
        seq: Pose sequence or raw (T, J, 3) array
        order: 1 for velocity (T - 1 rows), 2 for acceleration (T - 2 rows)

    Returns:
        Array of differences in meters per frame (or per frame squared)
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    frames = seq.frames if isinstance(seq, PoseSequence) else np.asarray(seq, dtype=np.float64)
    if frames.shape[0] < order + 1:
        raise ValueError(f"sequence too short: order {order} needs at least {order + 1} "
                         f"frames, got {frames.shape[0]}")
    return frame_difference(frames, order)


def horizontal_flip(seq: PoseSequence) -> PoseSequence:
    """
    Mirror a sequence across the lateral axis and swap left/right joints.

    Args:
        seq: Sequence whose topology declares left_right_pairs

    Returns:
        The mirrored sequence; flipping twice restores the input exactly
    """
    topology = seq.topology
    if not topology.left_right_pairs:
        raise ValueError(f"topology '{topology.name}' declares no left/right pairs to flip")
    return seq.replace(frames=flip_frames(seq.frames, topology))


def flip_frames(frames: np.ndarray, topology: SkeletonTopology) -> np.ndarray:
    """Array form of horizontal_flip for (..., J, 3) arrays."""
    flipped = np.array(frames[..., topology.mirror_index(), :])
    flipped[..., topology.lateral_axis] *= -1.0
    return flipped
