"""TOML run configuration mirroring the dataclass configs; unknown keys are errors.

Example::

    [gen]
    T = 16
    spawn_prob = 0.35

    [net]
    update_depth = "T34"

    [pipeline]
    keyframe_interval = 5

    [train]
    epochs = 10

    [experiment]
    intervals = [1, 5, 10]
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiment import DeskConfig
from .nets import NetConfig
from .pipeline import PipelineConfig
from .synthdata import GenParams
from .train import PretrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    train_clips: int = 200
    eval_clips: int = 50
    val_clips: int = 20
    intervals: tuple[int, ...] = tuple(range(1, 11))
    depths: tuple[str, ...] = ("T18", "T34", "T50", "T101")
    modes: tuple[str, ...] = ("accel", "warp_only", "single_frame")


@dataclass
class Config:
    gen: GenParams = field(default_factory=GenParams)
    net: NetConfig = field(default_factory=NetConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def desk(self) -> DeskConfig:
        e = self.experiment
        return DeskConfig(gen=self.gen, net=self.net, pretrain=self.pretrain, train=self.train,
                          train_clips=e.train_clips, eval_clips=e.eval_clips,
                          val_clips=e.val_clips, intervals=e.intervals, depths=e.depths)

    def with_seed(self, seed: int) -> "Config":
        return replace(self, gen=replace(self.gen, seed=seed),
                       pretrain=replace(self.pretrain, seed=seed),
                       train=replace(self.train, seed=seed))


def _section(cls, values: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"[{name}] unknown keys {unknown}; allowed: {sorted(known)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_config(text: str) -> Config:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML: {exc}") from exc
    sections = {f.name: f for f in fields(Config)}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown sections {unknown}; allowed: {sorted(sections)}")
    built = {}
    for name, value in doc.items():
        if not isinstance(value, dict):
            raise ConfigError(f"top-level key {name!r} must be a [section]")
        built[name] = _section(type(getattr(Config(), name)), value, name)
    cfg = Config(**built)
    cfg.gen.validate()
    if cfg.gen.num_classes != cfg.net.num_classes:
        raise ConfigError(f"gen.num_classes={cfg.gen.num_classes} != net.num_classes={cfg.net.num_classes}")
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())
