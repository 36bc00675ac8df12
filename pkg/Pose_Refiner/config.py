"""
Run Configuration

One JSON document configures a whole pipeline run. Each section maps onto
the dataclass that owns it and is validated by that class:

    {
      "seed": 7,
      "topology": "h36m17",
      "model": {"depth": 2, "feature_dim": 64, "embed_dim": 64, "max_frames": 48},
      "pretrain": {"epochs": 30, "batch_size": 8},
      "ttt": {"epochs": 30},
      "weights": {"lim": 200},
      "occlusion": {"span_seconds": 0.8, "period_seconds": 1.92}
    }

Unknown sections or keys are rejected. Command-line flags override the file.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional

from motion_prior import MotionPriorConfig
from occlusion_sim import OcclusionSpec
from pretrain import MaskSpec, NoiseSpec, PretrainConfig
from ttt_refine import LossWeights, TTTConfig

DEFAULT_OUTPUT_DIR = "Outputs"
OUTPUT_DIR_ENV = "POSE_REFINE_OUTPUT_DIR"

SECTION_TYPES = {
    'model': MotionPriorConfig,
    'mask': MaskSpec,
    'noise': NoiseSpec,
    'pretrain': PretrainConfig,
    'weights': LossWeights,
    'ttt': TTTConfig,
    'occlusion': OcclusionSpec,
}
_SEEDED_SECTIONS = ('mask', 'noise', 'pretrain', 'ttt', 'occlusion')


@dataclass
class RunConfig:
    """Every tunable of a pipeline run."""

    model: MotionPriorConfig = field(default_factory=MotionPriorConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ttt: TTTConfig = field(default_factory=TTTConfig)
    occlusion: OcclusionSpec = field(default_factory=OcclusionSpec)
    seed: Optional[int] = None
    topology: str = "h36m17"
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.seed is not None:
            self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        """Give every randomized section the same global seed."""
        self.seed = int(seed)
        for name in _SEEDED_SECTIONS:
            setattr(self, name, replace(getattr(self, name), seed=self.seed))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """
        Build a RunConfig from parsed JSON.

        Args:
            data: Mapping of section names to field mappings, plus seed/topology/output_dir

        Returns:
            The validated RunConfig
        """
        scalars = {'seed', 'topology', 'output_dir'}
        unknown = set(data) - set(SECTION_TYPES) - scalars
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")

        kwargs: Dict[str, Any] = {key: data[key] for key in scalars if key in data}
        for name, section_type in SECTION_TYPES.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ValueError(f"config section '{name}' must be an object")
            allowed = {item.name for item in fields(section_type)}
            bad = set(section) - allowed
            if bad:
                raise ValueError(f"unknown keys in config section '{name}': {sorted(bad)}")
            try:
                kwargs[name] = section_type(**section)
            except (TypeError, ValueError) as e:
                raise ValueError(f"config section '{name}': {e}") from None
        return cls(**kwargs)


def load_config(path: Optional[str]) -> RunConfig:
    """Load a config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path) as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, 'w') as handle:
        json.dump(cfg.to_dict(), handle, indent=2, sort_keys=True)
        handle.write('\n')


def resolve_output_dir(cli_out: Optional[str] = None, cfg: Optional[RunConfig] = None) -> str:
    """
    Pick the output directory.

    --out wins, then the POSE_REFINE_OUTPUT_DIR environment variable, then the
    config file, then Outputs/ under the working directory.

    Args:
        cli_out: Value of --out, if given
        cfg: Loaded run config

    Returns:
        The directory path (not created)
    """
    if cli_out:
        return cli_out
    env_value = os.environ.get(OUTPUT_DIR_ENV)
    if env_value:
        return env_value
    if cfg is not None and cfg.output_dir:
        return cfg.output_dir
    return os.path.join(os.getcwd(), DEFAULT_OUTPUT_DIR)
