"""Run configuration: INI-style ``key = value`` text with sections.

Every key has a default; unknown sections or keys are rejected so a typo
never silently falls back to a default. Example::

    [model]
    crop_size = 32
    backbone_channels = 16, 32

    [train]
    steps = 300
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .matching import LossWeights
from .model import ModelConfig, ModelConfigError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    step_size: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    epochs: int = 0              # when > 0, overrides steps: epochs * ceil(train frames / batch)
    batch_clips: int = 2
    seed: int = 0
    checkpoint_interval: int = 100


@dataclass(frozen=True)
class DataConfig:
    data_dir: str = "data"
    num_sequences: int = 35
    splits: tuple[int, ...] = (25, 3, 7)
    frame_height: int = 64
    frame_width: int = 64
    num_frames: int = 20
    count_min: int = 1
    count_max: int = 10
    radius_min: float = 3.0
    radius_max: float = 5.0
    blend: float = 0.6
    max_speed: float = 1.5
    fps: float = 25.0


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.3
    split: str = "test"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    inference: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, train=replace(self.train, seed=seed))


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if default is None:
            raw = raw.strip()
            return None if raw.lower() in ("", "none") else int(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    parts = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        defaults = {f.name: f.default for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(raw, defaults[key], f"[{section}] {key}")
        try:
            parts[section] = cls(**values)
        except (ModelConfigError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            elif val is None:
                val = "none"
            lines.append(f"{f.name} = {val}")
        lines.append("")
    return "\n".join(lines)
