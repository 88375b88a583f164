"""Experiment configuration: profiles, INI reading and fully materialised echo."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .encoders import ImageEncoderConfig, TextEncoderConfig, check_tower_dims
from .geodata import Nuisance, PartitionConfig, SyntheticCityConfig
from .losses import LossConfig
from .training import Stage1Config, Stage2Config

PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    pass


@dataclass
class EvaluationConfig:
    thresholds_n: List[int] = field(default_factory=lambda: [1, 5])
    positive_radius_m: float = 25.0
    val_fraction: float = 0.1


@dataclass
class DataConfig:
    manifest: str = ""


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    city: SyntheticCityConfig = field(default_factory=SyntheticCityConfig)
    image_encoder: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, seed=seed)
        cfg.city = dataclasses.replace(self.city, seed=seed)
        cfg.stage1 = dataclasses.replace(self.stage1, seed=seed)
        cfg.stage2 = dataclasses.replace(self.stage2, seed=seed)
        return cfg

    def echo(self, *sections: str) -> Dict[str, Any]:
        """Plain-dict view of the named sections (all sections when none given)."""
        d = dataclasses.asdict(self)
        return {k: d[k] for k in sections} if sections else d


def profile_defaults(profile: str) -> ExperimentConfig:
    if profile == "desk":
        return ExperimentConfig(
            profile="desk",
            partition=PartitionConfig(M=50.0, alpha=180.0, N=2, L=2),
            city=SyntheticCityConfig(extent_east=200.0, extent_north=200.0, image_size=32,
                                     renders_per_class=16, database_per_class=2,
                                     queries_per_class=32, texture_grid=8),
            image_encoder=ImageEncoderConfig(family="conv", depth=4, width=32, output_dim=64,
                                             input_size=32),
            text_encoder=TextEncoderConfig(depth=2, width=64, output_dim=64),
            stage1=Stage1Config(epochs=150, batch_size=64, lr=0.01),
            stage2=Stage2Config(epochs=16, batch_size=32, encoder_lr=1e-3, head_lr=0.01,
                                iterations_per_group=40, groups_in_cycle=8),
        )
    if profile == "paper":
        # recorded training numbers; runtime at this scale is not a goal
        return ExperimentConfig(
            profile="paper",
            partition=PartitionConfig(M=10.0, alpha=60.0, N=3, L=2),
            city=SyntheticCityConfig(extent_east=200.0, extent_north=200.0, image_size=224,
                                     renders_per_class=20, texture_grid=8,
                                     nuisance=Nuisance(viewpoint_jitter_meters=4.0)),
            image_encoder=ImageEncoderConfig(family="transformer", depth=12, width=768,
                                             patch_size=16, output_dim=512, input_size=224,
                                             heads=6),
            text_encoder=TextEncoderConfig(depth=12, width=512, heads=8, output_dim=512),
            stage1=Stage1Config(epochs=480, batch_size=512, lr=0.01),
            stage2=Stage2Config(epochs=64, batch_size=32, encoder_lr=1e-4, head_lr=0.01,
                                iterations_per_group=10000, groups_in_cycle=8),
        )
    raise ConfigError(f"unknown profile {profile!r}; expected one of {', '.join(PROFILES)}")


def _coerce(value: str, current: Any, key: str) -> Any:
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            return [int(v) for v in value.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value.strip()


def _apply(obj: Any, items: Dict[str, str], section: str) -> Any:
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in names or dataclasses.is_dataclass(getattr(obj, key)):
            raise ConfigError(f"unknown key [{section}] {key}")
        updates[key] = _coerce(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys such as M, N, L are case-sensitive
    return parser


def load_config(path: Optional[str | os.PathLike] = None, profile: Optional[str] = None,
                seed: Optional[int] = None) -> ExperimentConfig:
    """Profile defaults, then file values, then explicit overrides."""
    parser = _parser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    cfg = profile_defaults(profile or exp.get("profile", "desk"))
    for key, raw in exp.items():
        if key == "profile":
            continue
        if key != "seed":
            raise ConfigError(f"unknown key [experiment] {key}")
        cfg.seed = _coerce(raw, 0, "[experiment] seed")
    sections = {f.name for f in dataclasses.fields(cfg)} - {"profile", "seed"}
    for section in parser.sections():
        if section == "experiment":
            continue
        if section == "nuisance":
            cfg.city = dataclasses.replace(
                cfg.city, nuisance=_apply(cfg.city.nuisance, dict(parser[section]), section))
            continue
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        setattr(cfg, section, _apply(getattr(cfg, section), dict(parser[section]), section))
    if seed is not None:
        cfg.seed = seed
    cfg = cfg.with_seed(cfg.seed)
    try:
        check_tower_dims(cfg.image_encoder, cfg.text_encoder)
        cfg.city.validate(cfg.partition)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text with every default materialised; reading it back yields ``cfg``."""
    parser = _parser()
    parser["experiment"] = {"profile": cfg.profile, "seed": str(cfg.seed)}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if not dataclasses.is_dataclass(value):
            continue
        section = {}
        for sub in dataclasses.fields(value):
            v = getattr(value, sub.name)
            if dataclasses.is_dataclass(v):
                parser[sub.name] = {k: _fmt(x) for k, x in dataclasses.asdict(v).items()}
            else:
                section[sub.name] = _fmt(v)
        parser[f.name] = section
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _fmt(v: Any) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
