"""Flat key=value run configuration.

A config file is plain text: one `key = value` per line, `#` comments,
blank lines ignored. Every key has a typed default; unknown keys are
rejected by name. Command-line `--set key=value` pairs override file
values.
"""

from dataclasses import dataclass, fields

from .detection import LossWeights
from .model import ModelConfig
from .scene import ModalityKind


class ConfigError(Exception):
    pass


_MODALITIES = tuple(m.value for m in ModalityKind)


def _parse_modalities(raw):
    names = [p.strip() for p in raw.split(",") if p.strip()]
    if not names:
        raise ConfigError("modalities must name at least one agent")
    for n in names:
        if n not in _MODALITIES:
            raise ConfigError(f"unknown modality {n!r} (choose from "
                              f"{', '.join(_MODALITIES)})")
    return tuple(names)


@dataclass(frozen=True)
class RunConfig:
    # world and model geometry
    world_range: float = 51.2
    grid_size: int = 48
    stem_channels: int = 16
    unified_channels: int = 32
    adapter_ratio: int = 4
    depth_bins: int = 16
    window: int = 4
    # agent roster: modality per agent, slot 0 is the base/ego agent
    modalities: tuple = ("pillar", "voxel", "depth", "bev")
    # stage budgets
    base_steps: int = 200
    lhft_steps: int = 150
    gcft_steps: int = 150
    batch: int = 4
    lr: float = 1e-2
    train_scenes: int = 24
    gcft_scenes: int = 200
    eval_scenes: int = 20
    sweep_scenes: int = 10
    # loss weights and decoding
    lambda_cls: float = 1.0
    lambda_reg: float = 2.0
    lambda_dir: float = 0.2
    lambda_depth: float = 1.0
    score_threshold: float = 0.2
    nms_iou: float = 0.15
    # run identity
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.modalities, str):
            object.__setattr__(self, "modalities",
                               _parse_modalities(self.modalities))
        positive = ("world_range", "grid_size", "stem_channels",
                    "unified_channels", "depth_bins", "window", "base_steps",
                    "lhft_steps", "gcft_steps", "batch", "train_scenes",
                    "gcft_scenes", "sweep_scenes")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got "
                                  f"{getattr(self, name)}")
        if self.adapter_ratio < 2:
            raise ConfigError(f"adapter_ratio must be >= 2, got "
                              f"{self.adapter_ratio}")
        if self.eval_scenes < 0:
            raise ConfigError(f"eval_scenes must be >= 0, got "
                              f"{self.eval_scenes}")
        if self.lr < 0:
            raise ConfigError(f"lr must be nonnegative, got {self.lr}")
        if self.grid_size % 4 != 0:
            raise ConfigError(f"grid_size must be divisible by 4, got "
                              f"{self.grid_size}")
        if not self.modalities:
            raise ConfigError("modalities must name at least one agent")
        if len(self.modalities) > 8:
            raise ConfigError(f"at most 8 agents, got {len(self.modalities)}")

    def model_config(self):
        return ModelConfig(
            c0=self.stem_channels, c=self.unified_channels,
            r=self.adapter_ratio, depth_bins=self.depth_bins,
            grid_size=self.grid_size, world_range=self.world_range,
            window=self.window,
            weights=LossWeights(self.lambda_cls, self.lambda_reg,
                                self.lambda_dir, self.lambda_depth),
            score_threshold=self.score_threshold, nms_iou=self.nms_iou)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    if key == "modalities":
        return _parse_modalities(raw)
    if key == "out_dir":
        return raw
    kind = _FIELDS[key]
    try:
        if kind == "int" or kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}")


def parse_pairs(pairs):
    """key=value strings -> validated {key: typed value}."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key, raw = key.strip(), raw.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=()):
    """Read a config file (optional) and apply override pairs on top."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        for lineno, line in enumerate(lines, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected key = value, "
                                  f"got {body!r}")
            key, raw = body.split("=", 1)
            key, raw = key.strip(), raw.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown config key "
                                  f"{key!r}")
            values[key] = _coerce(key, raw)
    values.update(parse_pairs(overrides))
    return RunConfig(**values)
