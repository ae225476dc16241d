"""JSON experiment configs mapped onto :class:`~slimssl.trainer.TrainConfig`.

Every section is a flat object whose keys are the fields of the matching
dataclass. Unknown keys are rejected at every level, and :func:`to_dict`
always writes every field so a saved config has no implicit defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import Any

from .data import DataConfig
from .nn import EncoderSpec
from .objectives import ConfigError, GroupRegConfig, LossSpec
from .schedule import SamplingSchedule
from .trainer import CollapseConfig, OptimizerConfig, TrainConfig

__all__ = ["CONFIG_VERSION", "ExperimentConfig", "from_dict", "load_config", "save_config", "to_dict"]

CONFIG_VERSION = 1

SECTIONS: dict[str, type] = {
    "encoder": EncoderSpec,
    "loss": LossSpec,
    "schedule": SamplingSchedule,
    "groupreg": GroupRegConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "collapse": CollapseConfig,
}
SCALARS = ("seed", "target_mode", "teacher_full_width", "sub_weight", "augmentation")


@dataclasses.dataclass
class ExperimentConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    version: int = CONFIG_VERSION


def _section(name: str, cls: type, raw: Any) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {unknown}; allowed: {sorted(known)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"version", "output_dir", *SECTIONS, *SCALARS}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}; allowed: {sorted(allowed)}")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    parts = {name: _section(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    scalars = {k: doc[k] for k in SCALARS if k in doc}
    try:
        train = TrainConfig(**parts, **scalars)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(train=train, output_dir=str(doc.get("output_dir", "runs/default")), version=version)


def to_dict(cfg: ExperimentConfig) -> dict:
    t = cfg.train
    doc: dict[str, Any] = {"version": cfg.version, "output_dir": cfg.output_dir}
    for name in SECTIONS:
        doc[name] = dataclasses.asdict(getattr(t, name))
    for name in SCALARS:
        doc[name] = getattr(t, name)
    return doc


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=False)
        fh.write("\n")
