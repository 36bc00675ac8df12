"""
Dual-Stream Spatio-Temporal Motion Prior

The motion prior maps a noisy T x J x 3 pose sequence to a refined one. Each
of its layers runs two attention streams over the same features:
- stream A: spatial attention (joints within a frame) then temporal attention
- stream B: temporal attention (frames per joint) then spatial attention
and fuses them per element with a learned gate alpha in (0, 1).

Checkpoints are zip archives holding the config as JSON plus the parameters
in a little-endian binary layout (version "mp-v1"); see save_checkpoint.
"""

import io
import json
import logging
import struct
import zipfile
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from skeleton import PoseSequence

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "mp-v1"
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {0: ('<f4', torch.float32), 1: ('<f8', torch.float64)}
_ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class MotionPriorConfig:
    """Architecture hyper-parameters of the motion prior."""

    depth: int = 5
    heads: int = 8
    feature_dim: int = 512
    embed_dim: int = 512
    max_frames: int = 243
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    num_joints: int = 17
    input_channels: int = 3

    def __post_init__(self):
        for name in ('depth', 'heads', 'feature_dim', 'embed_dim', 'max_frames', 'num_joints'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.feature_dim % self.heads != 0:
            raise ValueError(f"feature_dim {self.feature_dim} is not divisible by heads {self.heads}")
        if not self.mlp_ratio > 0:
            raise ValueError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.input_channels != 3:
            raise ValueError(f"input_channels is fixed at 3, got {self.input_channels}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MotionPriorConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown motion prior config fields: {sorted(unknown)}")
        return cls(**data)


class MultiHeadSelfAttention(nn.Module):
    """Multi-head softmax(Q K^T / sqrt(d_K)) V over the token axis of (N, L, C) input."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)
        self.proj_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = rearrange(self.to_qkv(x), 'n l (three h d) -> three n h l d',
                            three=3, h=self.heads)
        attn = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        attn = attn.softmax(dim=-1)
        out = torch.matmul(self.attn_drop(attn), v)
        out = self.proj_drop(self.proj(rearrange(out, 'n h l d -> n l (h d)')))
        return out, attn


class AttentionBlock(nn.Module):
    """
    Pre-norm transformer block attending over joints ("spatial") or frames ("temporal").

    Input and output are (B, T, J, C); attention never mixes batch entries.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float, mode: str):
        super().__init__()
        if mode not in ('spatial', 'temporal'):
            raise ValueError(f"unknown attention mode: {mode}")
        self.mode = mode
        self.dim = dim
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch, frames, joints, _ = x.shape
        if self.mode == 'spatial':
            tokens = rearrange(x, 'b t j c -> (b t) j c')
        else:
            tokens = rearrange(x, 'b t j c -> (b j) t c')

        attended, attn = self.attn(self.norm1(tokens))
        tokens = tokens + attended
        tokens = tokens + self.mlp(self.norm2(tokens))

        if self.mode == 'spatial':
            out = rearrange(tokens, '(b t) j c -> b t j c', b=batch, t=frames)
        else:
            out = rearrange(tokens, '(b j) t c -> b t j c', b=batch, j=joints)
        return out, attn


def _run_block(features: torch.Tensor, block: AttentionBlock,
               mode: str) -> Tuple[torch.Tensor, torch.Tensor]:
    if block.mode != mode:
        raise ValueError(f"expected a {mode} block, got a {block.mode} block")
    if features.ndim not in (3, 4) or features.shape[-1] != block.dim:
        raise ValueError(f"features must be (T, J, {block.dim}) or (B, T, J, {block.dim}), "
                         f"got {tuple(features.shape)}")
    unbatched = features.ndim == 3
    out, attn = block(features[None] if unbatched else features)
    return (out[0] if unbatched else out), attn


def spatial_attention(features: torch.Tensor, block: AttentionBlock,
                      return_attention: bool = False):
    """
    Spatial block: per frame, attention over the J joint tokens.

    Args:
        features: (T, J, C) or (B, T, J, C) features
        block: A spatial AttentionBlock
        return_attention: Also return the (B * T, heads, J, J) attention maps

    Returns:
        Features of the input shape (and the attention maps if requested)
    """
    out, attn = _run_block(features, block, 'spatial')
    return (out, attn) if return_attention else out


def temporal_attention(features: torch.Tensor, block: AttentionBlock,
                       return_attention: bool = False):
    """
    Temporal block: per joint, attention over the T frame tokens.

    Args:
        features: (T, J, C) or (B, T, J, C) features
        block: A temporal AttentionBlock
        return_attention: Also return the (B * J, heads, T, T) attention maps

    Returns:
        Features of the input shape (and the attention maps if requested)
    """
    out, attn = _run_block(features, block, 'temporal')
    return (out, attn) if return_attention else out


class DualStreamFusion(nn.Module):
    """alpha * A + (1 - alpha) * B with alpha = sigmoid(W [A; B] + b), per element."""

    def __init__(self, dim: int):
        super().__init__()
        self.gate = nn.Linear(dim * 2, dim)

    def forward(self, stream_a: torch.Tensor,
                stream_b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        alpha = torch.sigmoid(self.gate(torch.cat([stream_a, stream_b], dim=-1)))
        return alpha * stream_a + (1.0 - alpha) * stream_b, alpha


class DualStreamLayer(nn.Module):
    """One depth step: spatial->temporal and temporal->spatial streams plus fusion."""

    def __init__(self, config: MotionPriorConfig):
        super().__init__()
        args = (config.feature_dim, config.heads, config.mlp_ratio, config.dropout)
        self.spatial_a = AttentionBlock(*args, mode='spatial')
        self.temporal_a = AttentionBlock(*args, mode='temporal')
        self.temporal_b = AttentionBlock(*args, mode='temporal')
        self.spatial_b = AttentionBlock(*args, mode='spatial')
        self.fusion = DualStreamFusion(config.feature_dim)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        stream_a = temporal_attention(spatial_attention(x, self.spatial_a), self.temporal_a)
        stream_b = spatial_attention(temporal_attention(x, self.temporal_b), self.spatial_b)
        return self.fusion(stream_a, stream_b)


class MotionPrior(nn.Module):
    """
    Dual-stream spatio-temporal transformer refining (B, T, J, 3) pose sequences.

    Masked cells are given as a boolean (B, T, J) map; their coordinates are
    zeroed and a learnable mask embedding is added to their tokens.
    """

    def __init__(self, config: MotionPriorConfig):
        super().__init__()
        self.config = config
        self.joint_embed = nn.Linear(config.input_channels, config.embed_dim)
        self.mask_embedding = nn.Parameter(torch.zeros(config.embed_dim))
        self.spatial_pos = nn.Parameter(torch.zeros(config.num_joints, config.embed_dim))
        self.temporal_pos = nn.Parameter(torch.zeros(config.max_frames, config.embed_dim))
        if config.embed_dim != config.feature_dim:
            self.input_proj = nn.Linear(config.embed_dim, config.feature_dim)
        else:
            self.input_proj = nn.Identity()
        self.embed_drop = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList([DualStreamLayer(config) for _ in range(config.depth)])
        self.head = nn.Linear(config.feature_dim, config.input_channels)

        self.apply(self._init_weights)
        for table in (self.mask_embedding, self.spatial_pos, self.temporal_pos):
            nn.init.trunc_normal_(table, std=0.02)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def embed(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Token features (B, T, J, feature_dim) entering the first layer."""
        if mask is not None:
            mask = mask.to(torch.bool)[..., None]
            x = x.masked_fill(mask, 0.0)
        tokens = self.joint_embed(x)
        if mask is not None:
            tokens = tokens + mask.to(tokens.dtype) * self.mask_embedding
        frames = x.shape[1]
        tokens = tokens + self.spatial_pos[None, None] + self.temporal_pos[:frames][None, :, None]
        return self.input_proj(self.embed_drop(tokens))

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None,
                return_fusion: bool = False):
        """
        Refine a batch of pose sequences.

        Args:
            x: (B, T, J, 3) or (T, J, 3) coordinates
            mask: Optional boolean (B, T, J) / (T, J) map of masked cells
            return_fusion: Also return the per-layer fusion coefficients

        Returns:
            Refined coordinates with the shape of x (and the list of alphas if requested)
        """
        unbatched = x.ndim == 3
        if unbatched:
            x = x[None]
            mask = mask[None] if mask is not None else None
        if x.ndim != 4 or x.shape[-1] != self.config.input_channels:
            raise ValueError(f"expected (B, T, J, 3) input, got {tuple(x.shape)}")
        if x.shape[2] != self.config.num_joints:
            raise ValueError(f"model was built for {self.config.num_joints} joints, "
                             f"got {x.shape[2]}")
        if not 1 <= x.shape[1] <= self.config.max_frames:
            raise ValueError(f"sequence of {x.shape[1]} frames exceeds max_frames "
                             f"{self.config.max_frames}; use windowed refinement")

        features = self.embed(x, mask)
        alphas: List[torch.Tensor] = []
        for layer in self.layers:
            features, alpha = layer(features)
            alphas.append(alpha)
        out = self.head(features)

        if unbatched:
            out = out[0]
            alphas = [alpha[0] for alpha in alphas]
        return (out, alphas) if return_fusion else out

    def head_parameter_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters() if name.startswith('head.')]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def windowed_forward(model: MotionPrior, frames: torch.Tensor,
                     window: Optional[int] = None) -> torch.Tensor:
    """
    Forward a (T, J, 3) tensor through non-overlapping windows.

    Args:
        model: The motion prior
        frames: Dense coordinates, already in the model's dtype
        window: Window length; defaults to the model's max_frames

    Returns:
        (T, J, 3) refined coordinates, windows concatenated in time
    """
    window = window or model.config.max_frames
    if not 1 <= window <= model.config.max_frames:
        raise ValueError(f"window must lie in [1, {model.config.max_frames}], got {window}")
    chunks = [model(frames[start:start + window][None])[0]
              for start in range(0, frames.shape[0], window)]
    return chunks[0] if len(chunks) == 1 else torch.cat(chunks, dim=0)


def dual_stream_forward(model: MotionPrior, noisy: PoseSequence) -> PoseSequence:
    """
    Run the prior once over a dense pose sequence.

    Args:
        model: The motion prior
        noisy: Fully valid sequence no longer than max_frames

    Returns:
        The refined sequence (all frames valid)
    """
    if not noisy.fully_valid:
        raise ValueError("the motion prior needs a dense sequence; fill invalid frames "
                         "with linear_fill first")
    if noisy.num_frames > model.config.max_frames:
        raise ValueError(f"sequence of {noisy.num_frames} frames exceeds max_frames "
                         f"{model.config.max_frames}; use windowed refinement "
                         f"(ttt_refine with a window)")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        frames = torch.as_tensor(np.array(noisy.frames), dtype=model_dtype(model))
        refined = windowed_forward(model, frames)
    model.train(was_training)
    return noisy.replace(frames=refined.double().numpy(),
                         valid=np.ones(noisy.num_frames, dtype=bool))


def save_checkpoint(model: MotionPrior, path: str) -> None:
    """
    Write an "mp-v1" checkpoint archive.

    The archive holds config.json ({"version", "config"}) and tensors.bin:
    u32 tensor count, then per tensor u32 name length, UTF-8 name, u8 dtype
    code (0 float32, 1 float64), u32 ndim, ndim x u32 shape and the raw
    little-endian data. Entries carry a fixed timestamp so equal models give
    equal bytes.

    Args:
        model: Model to store
        path: Output archive path
    """
    state = model.state_dict()
    blob = io.BytesIO()
    blob.write(struct.pack('<I', len(state)))
    for name, tensor in state.items():
        if tensor.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype {tensor.dtype} for parameter {name}")
        encoded = name.encode('utf-8')
        blob.write(struct.pack('<I', len(encoded)))
        blob.write(encoded)
        blob.write(struct.pack('<BI', _DTYPE_CODES[tensor.dtype], tensor.ndim))
        blob.write(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
        little_endian = _CODE_DTYPES[_DTYPE_CODES[tensor.dtype]][0]
        blob.write(tensor.detach().cpu().numpy().astype(little_endian).tobytes())

    header = json.dumps({'version': CHECKPOINT_VERSION, 'config': model.config.to_dict()},
                        indent=2, sort_keys=True)
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_STORED) as archive:
        archive.writestr(zipfile.ZipInfo('config.json', date_time=_ZIP_TIMESTAMP), header)
        archive.writestr(zipfile.ZipInfo('tensors.bin', date_time=_ZIP_TIMESTAMP),
                         blob.getvalue())


def _read_tensors(data: bytes) -> Dict[str, torch.Tensor]:
    offset = 0

    def take(fmt: str) -> Tuple:
        nonlocal offset
        values = struct.unpack_from(fmt, data, offset)
        offset += struct.calcsize(fmt)
        return values

    tensors = {}
    (count,) = take('<I')
    for _ in range(count):
        (name_length,) = take('<I')
        name = data[offset:offset + name_length].decode('utf-8')
        offset += name_length
        code, ndim = take('<BI')
        if code not in _CODE_DTYPES:
            raise ValueError(f"unknown dtype code {code} for parameter {name}")
        shape = take(f'<{ndim}I') if ndim else ()
        np_dtype, torch_dtype = _CODE_DTYPES[code]
        numel = int(np.prod(shape)) if shape else 1
        nbytes = numel * np.dtype(np_dtype).itemsize
        array = np.frombuffer(data, dtype=np_dtype, count=numel, offset=offset).reshape(shape)
        offset += nbytes
        tensors[name] = torch.from_numpy(array.astype(np_dtype[1:])).to(torch_dtype)
    return tensors


def load_checkpoint(path: str) -> MotionPrior:
    """
    Read an "mp-v1" checkpoint archive.

    Args:
        path: Archive written by save_checkpoint

    Returns:
        The restored MotionPrior (in eval mode)
    """
    with zipfile.ZipFile(path, 'r') as archive:
        header = json.loads(archive.read('config.json').decode('utf-8'))
        if header.get('version') != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {header.get('version')!r} is not "
                             f"{CHECKPOINT_VERSION!r}")
        tensors = _read_tensors(archive.read('tensors.bin'))

    model = MotionPrior(MotionPriorConfig.from_dict(header['config']))
    dtypes = {tensor.dtype for tensor in tensors.values()}
    if dtypes == {torch.float64}:
        model = model.double()
    model.load_state_dict(tensors, strict=True)
    model.eval()
    logger.info(f"Loaded motion prior from {path} ({count_parameters(model)} parameters)")
    return model
