"""YAML run configuration with dotted overrides.

A config file holds one section per namespace (data, backbone, prompt,
classifier, localizer, train, loss, inference, augment); every key must
name a field of the matching dataclass. Command-line overrides use
dotted paths (``train.epochs=10``) and win over the file.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Type

import yaml

from .backbone import BackboneConfig
from .data import AugmentConfig, SyntheticConfig
from .evaluation import InferenceConfig
from .localizer import LocalizerConfig
from .matching import LossWeights
from .pipeline import TrainConfig
from .region_classifier import ClassifierConfig, PromptTrainConfig


class ConfigError(ValueError):
    pass


REGISTRY: dict[str, type] = {
    "data": SyntheticConfig,
    "backbone": BackboneConfig,
    "augment": AugmentConfig,
    "classifier": ClassifierConfig,
    "prompt": PromptTrainConfig,
    "localizer": LocalizerConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "inference": InferenceConfig,
}


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    validate_config(doc)
    return doc


def validate_config(cfg: dict) -> None:
    for section, values in cfg.items():
        if section not in REGISTRY:
            raise ConfigError(
                f"unknown config section {section!r}; known: {sorted(REGISTRY)}"
            )
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        known = {f.name for f in dataclasses.fields(REGISTRY[section])}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(
                f"unknown keys in section {section!r}: {sorted(unknown)}; "
                f"known: {sorted(known)}"
            )


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as YAML scalars."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in cfg.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        if key.count(".") != 1:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, field = key.split(".")
        out.setdefault(section, {})[field] = yaml.safe_load(raw)
    validate_config(out)
    return out


def _coerce(value: Any, target_type: Any) -> Any:
    if isinstance(value, list):
        return tuple(value)
    return value


def build(cfg: dict, section: str, **extra) -> Any:
    """Instantiate the section's dataclass from the config dict."""
    cls: Type = REGISTRY[section]
    values = dict(cfg.get(section) or {})
    values.update(extra)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kwargs[f.name] = _coerce(values[f.name], f.type)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad values in section {section!r}: {e}") from e


def resolved_dict(cfg: dict) -> dict:
    """Full config with defaults filled in, for hashing and manifests."""
    out = {}
    for section in REGISTRY:
        obj = build(cfg, section)
        if hasattr(obj, "to_dict"):
            out[section] = obj.to_dict()
        else:
            d = dataclasses.asdict(obj)
            out[section] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in d.items()
            }
    return out
