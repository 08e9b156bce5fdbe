"""Run configuration: one YAML file with a section per component.

Sections are ``geometry``, ``gains``, ``episode``, ``randomization``,
``ppo`` and ``mppi``; keys are the field names of the matching dataclass.
Values are layered as defaults < file < environment < ``--override``.
Environment variables use the prefix ``OMAV_DOOR__`` with double
underscores for the dots, e.g. ``OMAV_DOOR__PPO__TOTAL_STEPS=0``.
Unknown sections or keys are an error at every layer.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from omav_door.control import PoseGains
from omav_door.env import EpisodeConfig, RandomizationConfig
from omav_door.mppi import MppiConfig
from omav_door.ppo import PpoConfig
from omav_door.world import GeometryConfig

ENV_PREFIX = "OMAV_DOOR__"

SECTIONS = {
    "geometry": GeometryConfig,
    "gains": PoseGains,
    "episode": EpisodeConfig,
    "randomization": RandomizationConfig,
    "ppo": PpoConfig,
    "mppi": MppiConfig,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    gains: PoseGains = field(default_factory=PoseGains)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    mppi: MppiConfig = field(default_factory=MppiConfig)


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")]


def _plain(value):
    """YAML-friendly copy of a config value."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def to_dict(cfg: RunConfig) -> dict:
    """Nested plain-data snapshot; ``from_dict(to_dict(c)) == c`` field for field."""
    return {name: {k: _plain(getattr(getattr(cfg, name), k)) for k in _field_names(cls)}
            for name, cls in SECTIONS.items()}


def _check_keys(data: Mapping, origin: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{origin}: expected a mapping of sections")
    unknown = []
    for section, values in data.items():
        if section not in SECTIONS:
            unknown.append(str(section))
            continue
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        names = set(_field_names(SECTIONS[section]))
        unknown.extend(f"{section}.{k}" for k in values if k not in names)
    if unknown:
        raise ConfigError(f"{origin}: unknown config keys: {', '.join(sorted(unknown))}")


def _merge(base: dict, layer: Mapping) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in layer.items():
        out.setdefault(section, {}).update(values or {})
    return out


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value: {exc}") from exc
    return parts[0], parts[1], value


def env_overrides(environ: Mapping[str, str]) -> dict:
    layer: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment variable {name} must look like {ENV_PREFIX}SECTION__KEY")
        layer.setdefault(parts[0], {})[parts[1]] = yaml.safe_load(raw)
    return layer


def from_dict(data: Mapping, origin: str = "config") -> RunConfig:
    _check_keys(data, origin)
    sections = {}
    for name, cls in SECTIONS.items():
        values = dict(data.get(name) or {})
        if name == "mppi" and "noise_std" in values:
            values["noise_std"] = tuple(values["noise_std"])
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{origin}: invalid {name} section: {exc}") from exc
    return RunConfig(**sections)


def load_config(path=None, overrides: list[str] = (), environ: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve a :class:`RunConfig` from file, environment and overrides.

    The input file is only read, never written.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        loaded = loaded or {}
        _check_keys(loaded, str(path))
        data = _merge(data, loaded)
    env_layer = env_overrides(os.environ if environ is None else environ)
    _check_keys(env_layer, "environment")
    data = _merge(data, env_layer)
    cli_layer: dict = {}
    for text in overrides:
        section, key, value = parse_override(text)
        cli_layer.setdefault(section, {})[key] = value
    _check_keys(cli_layer, "override")
    data = _merge(data, cli_layer)
    return from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
