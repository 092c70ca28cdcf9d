"""Pipeline configuration: one frozen dataclass section per stage.

Config files are JSON objects whose top-level keys name sections; unknown
sections or keys are rejected. The config hash is the SHA-256 of the
canonical (sorted-key) JSON of the fully resolved config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .beam_classify import BeamConfig
from .curb_features import FeatureThresholds
from .gpr_filter import GprHyperparams
from .ground_seg import DynamicObjectConfig, GroundSegConfig
from .postprocess import PostprocessConfig

CONFIG_ENV = "ADICURB_CONFIG"


@dataclass(frozen=True)
class SensorConfig:
    num_rings: int = 64
    camera: str = "P2"
    image_width: int = 1242
    image_height: int = 375


@dataclass(frozen=True)
class AdiConfig:
    radius: int = 2
    clip: float = 0.5
    fill: bool = False
    fill_max_gap: int = 8


@dataclass(frozen=True)
class AnnotatorConfig:
    roi_range: float = 40.0  # horizontal range limit for curb candidates, meters


@dataclass(frozen=True)
class LabelConfig:
    dilation_width: int = 2


@dataclass(frozen=True)
class EvalConfig:
    tolerance: float = 2.0
    averaging: str = "micro"


@dataclass(frozen=True)
class PipelineConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    ground: GroundSegConfig = field(default_factory=GroundSegConfig)
    dynamic: DynamicObjectConfig = field(default_factory=DynamicObjectConfig)
    features: FeatureThresholds = field(default_factory=FeatureThresholds)
    beam: BeamConfig = field(default_factory=BeamConfig)
    gpr: GprHyperparams = field(default_factory=GprHyperparams)
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    adi: AdiConfig = field(default_factory=AdiConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, values in data.items():
            section_cls = sections[name].default_factory
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = section_cls(**values)
        return cls(**kwargs)

    def with_overrides(self, overrides: dict[str, object]) -> "PipelineConfig":
        """Apply ``{"section.key": value}`` overrides."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in data or key not in data[section]:
                raise ValueError(f"unknown config key: {dotted}")
            data[section][key] = value
        return PipelineConfig.from_dict(data)

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: str | os.PathLike | None = None) -> PipelineConfig:
    """Read a JSON config; falls back to ``$ADICURB_CONFIG`` and then defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    return PipelineConfig.from_dict(json.loads(Path(path).read_text()))


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override must look like section.key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
