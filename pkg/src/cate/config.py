"""INI experiment configuration covering data, augmentation, model, training and probes.

Fields shared between sections live in one place only: clip length, video
length, maximum time shift and channel count are set in ``[data]`` and
propagated to the augmentation policy and model; the training seed is the
experiment seed.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .augment import AugmentationPolicy
from .contrastive import TrainConfig
from .models import ModelConfig
from .synthgen import ConfigError, SpatialDataConfig, VideoDataConfig


@dataclass(frozen=True)
class ProbeConfig:
    windows: int = 3
    quant_step: int = 2
    pairs_per_video: int = 8
    l2: float = 1e-4
    ks: tuple[int, ...] = (1, 5, 10, 20, 50)
    seed: int = 0


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    seed: int = 0
    data_kind: str = "video"
    workers: int = 1


# keys derived from other sections, never written to or read from these
DERIVED = {
    "augment": ("n_frames", "clip_length", "max_time_shift"),
    "model": ("in_channels", "max_time_shift"),
    "train": ("seed",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: VideoDataConfig | SpatialDataConfig = field(default_factory=VideoDataConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def is_video(self) -> bool:
        return self.experiment.data_kind == "video"

    @property
    def clip_length(self) -> int:
        return self.data.clip_length if self.is_video else 1

    @property
    def out_size(self) -> int:
        return self.model.image_size

    def resolved(self) -> ExperimentConfig:
        """Fill the derived fields of augment, model and train from data and experiment."""
        if self.is_video:
            n_frames, clip, shift = self.data.T, self.data.clip_length, self.data.max_time_shift
            augment = replace(self.augment, n_frames=n_frames, clip_length=clip, max_time_shift=shift)
        else:
            shift = 0
            augment = replace(self.augment, n_frames=1, clip_length=1, max_time_shift=0, time_shift=False)
        model = replace(self.model, in_channels=self.data.C, max_time_shift=max(shift, 0))
        train = replace(self.train, seed=self.experiment.seed)
        return replace(self, augment=augment, model=model, train=train)

    def validate(self) -> None:
        if self.experiment.data_kind not in ("video", "spatial"):
            raise ConfigError(f"data_kind must be 'video' or 'spatial', got {self.experiment.data_kind!r}")
        self.data.validate()
        cfg = self.resolved()
        cfg.augment.validate()
        cfg.model.validate()
        cfg.train.validate()
        if not self.is_video and "time" in cfg.model.encode_kinds:
            raise ConfigError("still-image data has no time shift to encode; use encode = none or crop")
        if cfg.probe.quant_step < 1:
            raise ConfigError("probe quant_step must be >= 1")


SECTIONS = ("experiment", "data", "augment", "model", "train", "probe")


def _section_class(section: str, data_kind: str):
    if section == "data":
        return VideoDataConfig if data_kind == "video" else SpatialDataConfig
    return {
        "experiment": ExperimentSection,
        "augment": AugmentationPolicy,
        "model": ModelConfig,
        "train": TrainConfig,
        "probe": ProbeConfig,
    }[section]


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _section_items(obj, section: str) -> list[tuple[str, str]]:
    skip = DERIVED.get(section, ())
    return [(f.name, _format(getattr(obj, f.name))) for f in fields(obj) if f.name not in skip]


def to_ini(cfg: ExperimentConfig) -> str:
    """Every non-derived field of every section, in declaration order."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in _section_items(getattr(cfg, section), section))
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str) -> ExperimentConfig:
    """Parse INI text; unknown sections or keys are errors, missing keys take defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {str(exc).splitlines()[0]}") from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    raw_kind = parser.get("experiment", "data_kind", fallback="video").strip()
    parts = {}
    for section in SECTIONS:
        cls = _section_class(section, raw_kind if raw_kind in ("video", "spatial") else "video")
        defaults = cls()
        allowed = {f.name for f in fields(cls)} - set(DERIVED.get(section, ()))
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in allowed:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                kwargs[key] = _parse(raw, getattr(defaults, key), f"[{section}] {key}")
        parts[section] = cls(**kwargs)
    cfg = ExperimentConfig(**parts)
    cfg.validate()
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return from_ini(p.read_text(encoding="utf-8"))


def with_overrides(cfg: ExperimentConfig, section: str, **values: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with fields of one section replaced (validated)."""
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    out = replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    out.validate()
    return out
