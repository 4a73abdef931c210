"""Run configuration: one YAML document (or a shipped preset) describing the
backbone, schedule, sampler, training, and data sections, validated with
field-specific messages before any compute starts.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import yaml

from .ascend import ASCEND, ASCENDConfig
from .iuvit import IUViT, IUViTConfig
from .samplers import GuidanceMode, GuidanceSpec, SamplerFamily, SamplerSpec
from .schedule import NoiseSchedule, make_cosine_schedule, make_linear_schedule
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "ScheduleConfig",
    "DataConfig",
    "RunConfig",
    "available_presets",
    "load_preset",
    "load_run_config",
    "build_backbone",
    "build_schedule",
    "backbone_config_to_dict",
    "backbone_config_from_dict",
]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    offset: float = 0.008


@dataclass(frozen=True)
class DataConfig:
    dataset_dir: Optional[str] = None
    embedding_file: Optional[str] = None
    labels_manifest: Optional[str] = None
    num_classes: Optional[int] = None


@dataclass(frozen=True)
class RunConfig:
    backbone: Union[IUViTConfig, ASCENDConfig]
    schedule: ScheduleConfig
    sampler: SamplerSpec
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    checkpoint_interval: int = 1000
    sample_interval: int = 0  # 0 disables periodic sample grids


def available_presets() -> list[str]:
    root = resources.files("vitdiff") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> dict:
    root = resources.files("vitdiff") / "presets"
    path = root / f"{name}.yaml"
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError("preset", f"unknown preset {name!r}; available: {available_presets()}")
    return yaml.safe_load(text)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _build_section(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown field")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from e


def backbone_config_from_dict(section: dict) -> Union[IUViTConfig, ASCENDConfig]:
    section = dict(section)
    kind = section.pop("type", None)
    if kind == "iuvit":
        cfg = _build_section(IUViTConfig, section, "backbone")
    elif kind == "ascend":
        if "channel_mult" in section:
            section["channel_mult"] = tuple(section["channel_mult"])
        if "attention_resolutions" in section:
            section["attention_resolutions"] = tuple(section["attention_resolutions"])
        cfg = _build_section(ASCENDConfig, section, "backbone")
    else:
        raise ConfigError("backbone.type", f"must be 'iuvit' or 'ascend', got {kind!r}")
    return cfg


def backbone_config_to_dict(cfg: Union[IUViTConfig, ASCENDConfig]) -> dict:
    d = dataclasses.asdict(cfg)
    d["type"] = "iuvit" if isinstance(cfg, IUViTConfig) else "ascend"
    for key in ("channel_mult", "attention_resolutions"):
        if key in d:
            d[key] = list(d[key])
    return d


def _build_sampler(section: dict) -> SamplerSpec:
    section = dict(section)
    guidance = section.pop("guidance", {}) or {}
    try:
        gmode = GuidanceMode(guidance.get("mode", "none"))
    except ValueError:
        raise ConfigError("sampler.guidance.mode", f"unknown mode {guidance.get('mode')!r}")
    try:
        gspec = GuidanceSpec(mode=gmode, scale=float(guidance.get("scale", 1.0)))
    except ValueError as e:
        raise ConfigError("sampler.guidance.scale", str(e))
    try:
        family = SamplerFamily(section.pop("family", "ancestral"))
    except ValueError as e:
        raise ConfigError("sampler.family", str(e))
    section["guidance"] = gspec
    section["family"] = family
    return _build_section(SamplerSpec, section, "sampler")


def _validate_cross_section(cfg: RunConfig):
    bk = cfg.backbone
    if cfg.schedule.kind not in ("linear", "cosine"):
        raise ConfigError("schedule.kind", f"must be 'linear' or 'cosine', got {cfg.schedule.kind!r}")
    if cfg.sampler.num_steps > cfg.schedule.num_steps:
        raise ConfigError(
            "sampler.num_steps",
            f"{cfg.sampler.num_steps} exceeds schedule.num_steps {cfg.schedule.num_steps}",
        )
    if isinstance(bk, ASCENDConfig):
        ladder = {bk.image_size >> s for s in range(bk.num_stages)}
        for res in bk.attention_resolutions:
            if res not in ladder:
                raise ConfigError(
                    "backbone.attention_resolutions",
                    f"resolution {res} is not in the stage ladder {sorted(ladder, reverse=True)}",
                )
    if cfg.data.num_classes is not None:
        if isinstance(bk, IUViTConfig) and bk.num_classes != cfg.data.num_classes:
            raise ConfigError(
                "data.num_classes",
                f"{cfg.data.num_classes} does not match backbone.num_classes {bk.num_classes}",
            )
    if cfg.data.embedding_file is not None and not getattr(bk, "cross_attention", False):
        raise ConfigError(
            "data.embedding_file", "set but the backbone has cross_attention disabled"
        )


def load_run_config(source: Union[str, Path, dict]) -> RunConfig:
    """Load and validate a run configuration from a YAML path or a dict."""
    if isinstance(source, (str, Path)):
        with open(source) as f:
            doc = yaml.safe_load(f)
    else:
        doc = dict(source)
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    preset = doc.pop("preset", None)
    if preset is not None:
        doc = _deep_merge(load_preset(preset), doc)

    known = {
        "backbone", "schedule", "sampler", "train", "data",
        "output_dir", "checkpoint_interval", "sample_interval",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    if "backbone" not in doc:
        raise ConfigError("backbone", "section is required (or use 'preset')")

    backbone = backbone_config_from_dict(doc["backbone"])
    schedule = _build_section(ScheduleConfig, doc.get("schedule", {}) or {}, "schedule")
    sampler = _build_sampler(doc.get("sampler", {}) or {})
    train_section = dict(doc.get("train", {}) or {})
    if "betas" in train_section:
        train_section["betas"] = tuple(train_section["betas"])
    train = _build_section(TrainConfig, train_section, "train")
    data = _build_section(DataConfig, doc.get("data", {}) or {}, "data")
    cfg = RunConfig(
        backbone=backbone,
        schedule=schedule,
        sampler=sampler,
        train=train,
        data=data,
        output_dir=doc.get("output_dir", "runs/default"),
        checkpoint_interval=int(doc.get("checkpoint_interval", 1000)),
        sample_interval=int(doc.get("sample_interval", 0)),
    )
    _validate_cross_section(cfg)
    return cfg


def build_schedule(sc: ScheduleConfig) -> NoiseSchedule:
    if sc.kind == "linear":
        return make_linear_schedule(sc.num_steps, sc.beta_start, sc.beta_end)
    return make_cosine_schedule(sc.num_steps, sc.offset)


def build_backbone(cfg: Union[IUViTConfig, ASCENDConfig]):
    return IUViT(cfg) if isinstance(cfg, IUViTConfig) else ASCEND(cfg)
