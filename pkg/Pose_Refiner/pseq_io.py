"""
PSEQ Pose-Sequence Files

Reads and writes the pseq-v1 document: a JSON object carrying fps, the
embedded skeleton topology, per-frame validity and the T x J x 3 frames,
either as one nested list per line or as a packed little-endian float64
block. Keys the reader does not know are kept in PoseSequence.metadata and
written back unchanged.
"""

import base64
import glob
import json
import logging
import os
from typing import Any, Dict, List

import numpy as np

from skeleton import PoseSequence, SkeletonTopology

logger = logging.getLogger(__name__)

PSEQ_VERSION = "pseq-v1"
PACKED_ENCODING = "f8le-base64"
_KNOWN_KEYS = ('version', 'fps', 'num_frames', 'num_joints', 'topology', 'valid',
               'frames', 'frames_encoding', 'frames_b64')


class PseqFormatError(ValueError):
    """A PSEQ document that cannot be turned into a PoseSequence."""


def _frame_rows(frames: np.ndarray) -> List[str]:
    rows = []
    for frame in frames:
        cells = [[float(v) if np.isfinite(v) else None for v in joint] for joint in frame]
        rows.append(json.dumps(cells))
    return rows


def write_pseq(seq: PoseSequence, path: str, packed: bool = False) -> None:
    """
    Write a sequence as a pseq-v1 document.

    Args:
        seq: Sequence to write
        path: Destination file
        packed: Store frames as a base64 float64 block instead of text rows
    """
    header: Dict[str, Any] = {
        'version': PSEQ_VERSION,
        'fps': seq.fps,
        'num_frames': seq.num_frames,
        'num_joints': seq.num_joints,
        'topology': seq.topology.to_dict(),
        'valid': [bool(v) for v in seq.valid],
    }
    if packed:
        header['frames_encoding'] = PACKED_ENCODING
        header['frames_b64'] = base64.b64encode(
            np.ascontiguousarray(seq.frames, dtype='<f8').tobytes()).decode('ascii')
    for key, value in seq.metadata.items():
        if key in _KNOWN_KEYS:
            raise ValueError(f"metadata key '{key}' clashes with a PSEQ field")
        header[key] = value

    items = [f"  {json.dumps(key)}: {json.dumps(value, sort_keys=True)}"
             for key, value in header.items()]
    if not packed:
        rows = ',\n'.join('    ' + row for row in _frame_rows(seq.frames))
        items.append(f'  "frames": [\n{rows}\n  ]')

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as handle:
        handle.write('{\n' + ',\n'.join(items) + '\n}\n')


def _require(document: Dict[str, Any], key: str) -> Any:
    if key not in document:
        raise PseqFormatError(f"missing field '{key}'")
    return document[key]


def _decode_frames(document: Dict[str, Any], num_frames: int, num_joints: int) -> np.ndarray:
    encoding = document.get('frames_encoding')
    if encoding is None:
        try:
            frames = np.array(_require(document, 'frames'), dtype=np.float64)
        except (TypeError, ValueError):
            raise PseqFormatError("frames are not a rectangular T x J x 3 array") from None
        if frames.ndim != 3 and frames.size == 0:
            frames = frames.reshape(0, num_joints, 3)
    elif encoding == PACKED_ENCODING:
        raw = base64.b64decode(_require(document, 'frames_b64'))
        if len(raw) % 8:
            raise PseqFormatError(f"packed frames hold {len(raw)} bytes, not a multiple of 8")
        flat = np.frombuffer(raw, dtype='<f8').astype(np.float64)
        if flat.size != num_frames * num_joints * 3:
            raise PseqFormatError(f"shape mismatch: header declares {num_frames} x {num_joints} "
                                  f"x 3 values but the packed block holds {flat.size}")
        frames = flat.reshape(num_frames, num_joints, 3)
    else:
        raise PseqFormatError(f"unknown frames_encoding '{encoding}'")

    if frames.ndim != 3 or frames.shape[2:] != (3,):
        raise PseqFormatError(f"frames must be T x J x 3, got shape {frames.shape}")
    if frames.shape[0] != num_frames:
        raise PseqFormatError(f"shape mismatch: header declares T={num_frames} but "
                              f"{frames.shape[0]} frame rows were found")
    if frames.shape[1] != num_joints:
        raise PseqFormatError(f"shape mismatch: header declares J={num_joints} but "
                              f"frames have {frames.shape[1]} joints")
    return frames


def read_pseq(path: str) -> PoseSequence:
    """
    Read a pseq-v1 document.

    Args:
        path: File written by write_pseq (text or packed frames)

    Returns:
        The PoseSequence, with unknown keys in its metadata

    Raises:
        PseqFormatError: on version, shape or non-finite problems
    """
    with open(path) as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as e:
            raise PseqFormatError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(document, dict):
        raise PseqFormatError(f"{path} does not hold a JSON object")

    version = document.get('version')
    if version != PSEQ_VERSION:
        raise PseqFormatError(f"unsupported PSEQ version {version!r} (expected '{PSEQ_VERSION}')")

    try:
        topology = SkeletonTopology.from_dict(_require(document, 'topology'))
    except (TypeError, ValueError) as e:
        raise PseqFormatError(f"invalid topology: {e}") from None
    num_frames = int(_require(document, 'num_frames'))
    num_joints = int(_require(document, 'num_joints'))
    if num_joints != topology.joint_count:
        raise PseqFormatError(f"shape mismatch: header declares J={num_joints} but the "
                              f"topology has {topology.joint_count} joints")

    frames = _decode_frames(document, num_frames, num_joints)
    valid = np.asarray(_require(document, 'valid'), dtype=bool)
    if valid.shape != (num_frames,):
        raise PseqFormatError(f"shape mismatch: header declares T={num_frames} but 'valid' "
                              f"has {valid.size} entries")
    bad = np.flatnonzero(valid & ~np.isfinite(frames).all(axis=(1, 2)))
    if bad.size:
        raise PseqFormatError(f"non-finite coordinates on valid frame(s) {bad[:10].tolist()}")

    metadata = {key: value for key, value in document.items() if key not in _KNOWN_KEYS}
    try:
        return PoseSequence(frames=frames, fps=float(_require(document, 'fps')), valid=valid,
                            topology=topology, metadata=metadata)
    except ValueError as e:
        raise PseqFormatError(str(e)) from None


def load_pseq_dataset(directory: str) -> List[PoseSequence]:
    """Every *.pseq file in a directory, in file-name order."""
    paths = sorted(glob.glob(os.path.join(directory, '*.pseq')))
    if not paths:
        raise FileNotFoundError(f"no .pseq files found in {directory}")
    logger.info(f"Loading {len(paths)} sequences from {directory}")
    return [read_pseq(path) for path in paths]
