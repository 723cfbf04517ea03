"""Run configuration: profiles, YAML loading with strict keys, snapshots."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import SynthConfig
from .model import StackConfig, UNetConfig
from .optim import LrSchedule
from .train import TrainConfig

SCHEMA_VERSION = 1


class ConfigFileError(ValueError):
    pass


@dataclass
class ModelSection:
    depth: int = 3
    base_filters: int = 16
    in_channels: int = 3
    crop_margin: int = 8
    input_size: int = 72
    levels: int = 2
    stacking_input: str = "image_plus_prob"


@dataclass
class TrainingSection:
    seed: int = 0
    batch_size: int = 8
    patches_per_image: int = 4
    augment: bool = True
    empty_patch_keep: float = 1.0
    val_patches: int = 48
    jaccard_reduction: str = "pooled"
    level_init: str = "previous"
    # one list of [epochs, learning_rate] phases per stack level
    schedules: list = field(default_factory=lambda: [[[20, 1e-3], [20, 1e-4]], [[20, 1e-4]]])


@dataclass
class DataSection:
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    split_seed: int = 0
    binarize_masks: bool = False


@dataclass
class PipelineSection:
    tta: bool = True
    threshold: float = 0.5
    batch_size: int = 16
    scale: str = "1"
    rho: int = 3


@dataclass
class SynthSection:
    seed: int = 0
    count: int = 60
    tile_size: int = 512
    buildings: list = field(default_factory=lambda: [10, 22])
    size_range: list = field(default_factory=lambda: [16, 48])
    rotation: bool = True
    rotated_fraction: float = 0.3
    arbitrary_angles: bool = False
    touching_fraction: float = 0.2
    noise: float = 0.04
    roads: list = field(default_factory=lambda: [0, 2])


@dataclass
class PathsSection:
    dataset: str = "data/synth"
    checkpoints: str = "runs/checkpoints"
    output: str = "runs/output"


@dataclass
class RunConfig:
    profile: str = "desk"
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    synth: SynthSection = field(default_factory=SynthSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # derived objects

    def unet_config(self, level: int = 0) -> UNetConfig:
        return self.stack_config().per_level[level]

    def stack_config(self) -> StackConfig:
        m = self.model
        base = UNetConfig(m.depth, m.base_filters, m.in_channels, m.crop_margin, m.input_size)
        return StackConfig.uniform(base, m.levels, m.stacking_input)

    def train_config(self, level: int) -> TrainConfig:
        t = self.training
        if level >= len(t.schedules):
            raise ConfigFileError(f"no training schedule for level {level}")
        schedule = LrSchedule(tuple((int(e), float(lr)) for e, lr in t.schedules[level]))
        return TrainConfig(schedule, t.batch_size, t.seed, t.patches_per_image, t.augment,
                           t.empty_patch_keep, t.val_patches, t.jaccard_reduction, t.level_init)

    def synth_config(self) -> SynthConfig:
        s = self.synth
        return SynthConfig(s.seed, s.count, s.tile_size, tuple(s.buildings), tuple(s.size_range), s.rotation,
                           s.rotated_fraction, s.arbitrary_angles, s.touching_fraction, s.noise, tuple(s.roads))

    def validate(self) -> None:
        self.stack_config().validate()
        if len(self.training.schedules) < self.model.levels:
            raise ConfigFileError(f"{self.model.levels} levels but only {len(self.training.schedules)} schedules")
        for level in range(self.model.levels):
            self.train_config(level)
        if self.training.batch_size < 1 or self.training.patches_per_image < 1:
            raise ConfigFileError("batch_size and patches_per_image must be positive")
        if not 0 < self.pipeline.threshold < 1:
            raise ConfigFileError("pipeline.threshold must lie in (0, 1)")
        self.synth_config().validate()

    # serialisation

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


PROFILES = {
    "desk": {},
    "paper": {
        "model": {"depth": 4, "base_filters": 32, "crop_margin": 16, "input_size": 224},
        "training": {
            "batch_size": 128,
            "schedules": [[[50, 1e-3], [50, 1e-4]], [[50, 1e-4]]],
        },
    },
}


def _merge(obj, updates: dict, where: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in updates.items():
        if key not in known:
            raise ConfigFileError(f"unknown key {where}{key!r}")
        current = getattr(obj, key)
        if hasattr(current, "__dataclass_fields__"):
            if not isinstance(value, dict):
                raise ConfigFileError(f"{where}{key} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            if isinstance(current, bool) and not isinstance(value, bool):
                raise ConfigFileError(f"{where}{key} must be true or false")
            if isinstance(current, (int, float)) and not isinstance(current, bool):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigFileError(f"{where}{key} must be a number")
                if isinstance(current, int) and not float(value).is_integer():
                    raise ConfigFileError(f"{where}{key} must be an integer")
                value = type(current)(value)
            setattr(obj, key, copy.deepcopy(value))
    return obj


def make_config(profile: str = "desk", overrides: dict | None = None) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigFileError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile)
    _merge(cfg, {k: v for k, v in PROFILES[profile].items()}, "")
    if overrides:
        _merge(cfg, overrides, "")
    cfg.validate()
    return cfg


def load_config(path=None, profile: str | None = None) -> RunConfig:
    """Read a YAML run config on top of its profile defaults.

    The file's ``profile`` key picks the defaults unless ``profile`` is
    given explicitly. Unknown keys anywhere are errors.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigFileError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigFileError(f"{path}: top level must be a mapping")
        version = raw.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigFileError(f"{path}: schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    file_profile = raw.pop("profile", "desk")
    return make_config(profile or file_profile, raw)


def resolve_path(cfg_path, value: str) -> Path:
    """Paths in a config file are relative to that file's directory."""
    p = Path(value)
    if p.is_absolute() or cfg_path is None:
        return p
    return Path(cfg_path).resolve().parent / p
