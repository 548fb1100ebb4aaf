"""Engine configuration: INI sections per module, every default in one place.

The CLI reads one config file and applies flag overrides on top; the review
service exposes the fusion section for live tuning.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class EngineSection:
    voxel_size: float = 0.1
    max_range: float = 100.0
    seed: int = 0


@dataclass
class EncodingSection:
    dim: int = 12
    base_wavelength_2d: float = 32.0
    base_wavelength_3d: float = 2.0
    mlp_seed: int = 0
    depth_bins: int = 8
    depth_near: float = 1.0
    depth_far: float = 60.0


@dataclass
class MemorySection:
    unprompted_capacity: int = 6
    prompted_capacity: int = 2
    attention_heads: int = 1


@dataclass
class FusionSection:
    eps: float = 0.5
    min_pts: int = 5
    vote_rate_threshold: float = 0.0
    overlap_threshold: float = 0.5
    transfer_radius_voxels: float = 1.5  # multiplied by voxel_size

    def transfer_radius(self, voxel_size: float) -> float:
        return self.transfer_radius_voxels * voxel_size


@dataclass
class ProtocolSection:
    clicks_per_prompt: int = 3
    iou_threshold: float = 0.75
    frame_budget: int = 8
    oracle_seed: int = 0
    corruption_rate: float = 0.0
    corruption_magnitude: int = 2


@dataclass
class MetricsSection:
    boundary_tolerance_fraction: float = 0.008


@dataclass
class Config:
    engine: EngineSection = field(default_factory=EngineSection)
    encoding: EncodingSection = field(default_factory=EncodingSection)
    memory: MemorySection = field(default_factory=MemorySection)
    fusion: FusionSection = field(default_factory=FusionSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTION_NAMES}


_SECTION_NAMES = ("engine", "encoding", "memory", "fusion", "protocol", "metrics")


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return type(current)(raw)


def load_config(path=None) -> Config:
    cfg = Config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    for section_name in parser.sections():
        if section_name not in _SECTION_NAMES:
            raise ValueError(f"unknown config section [{section_name}]")
        section = getattr(cfg, section_name)
        valid = {f.name for f in fields(section)}
        for key, raw in parser.items(section_name):
            if key not in valid:
                raise ValueError(f"unknown key {key!r} in section [{section_name}]")
            setattr(section, key, _coerce(getattr(section, key), raw))
    return cfg


def save_config(cfg: Config, path) -> None:
    parser = configparser.ConfigParser()
    for section_name in _SECTION_NAMES:
        parser[section_name] = {
            k: repr(v) if isinstance(v, float) else str(v)
            for k, v in asdict(getattr(cfg, section_name)).items()
        }
    buf = io.StringIO()
    parser.write(buf)
    Path(path).write_text(buf.getvalue())


def apply_overrides(cfg: Config, overrides: dict[str, str]) -> Config:
    """Apply 'section.key=value' overrides in place; returns cfg."""
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ValueError(f"override {dotted!r} must look like section.key")
        section_name, key = dotted.split(".", 1)
        if section_name not in _SECTION_NAMES:
            raise ValueError(f"unknown config section {section_name!r}")
        section = getattr(cfg, section_name)
        if not hasattr(section, key):
            raise ValueError(f"unknown key {key!r} in section [{section_name}]")
        setattr(section, key, _coerce(getattr(section, key), raw))
    return cfg
