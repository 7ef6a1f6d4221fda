"""Run configuration: one YAML file with a section per pipeline stage.

Example (all keys optional; omitted keys keep their defaults)::

    seed: 0
    env: {n_joints: 8, sensor_noise_sigma: 8.0}
    preprocess: {control_rate: 10, clip_bound: 1000.0, noise: [0.01, 0.01, 0.02, 0.02]}
    autoencoder: {latent_dim: 10, epochs: 1000}
    policy: {hidden_size: 64, gamma: 0.1, epochs: 3000}
    evaluate: {max_steps: 900, grace: 20, jobs: 1}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .core import config_hash
from .env import EnvConfig
from .preprocess import ConfigError


@dataclass
class PreprocessConfig:
    control_rate: int = 10
    clip_bound: float = 1000.0
    horizon: int = 2
    noise: tuple = (0.01, 0.01, 0.02, 0.02)
    noise_mode: str = "epoch"
    val_fraction: float = 0.2


@dataclass
class AESection:
    latent_dim: int = 10
    whole_hidden: tuple = (64, 32)
    thumb_hidden: tuple = (32, 16)
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    val_every: int = 5


@dataclass
class PolicySection:
    hidden_size: int = 64
    attention_hidden: int = 32
    gamma: float = 0.1
    strong_weight: float = 2.0
    constraint_mode: str = "switch"
    epochs: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    val_every: int = 10
    optimizer: str = "adam"


@dataclass
class EvalSection:
    max_steps: int = 900
    grace: int = 20
    hold: int = 10
    still_tol: float = 0.02
    jobs: int = 1


# ablation models: (attention, constraint)
MODELS = {"I": (True, True), "II": (False, True), "III": (True, False), "IV": (False, False)}


def model_id(attention: bool, constraint: bool) -> str:
    return next(k for k, v in MODELS.items() if v == (attention, constraint))


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    autoencoder: AESection = field(default_factory=AESection)
    policy: PolicySection = field(default_factory=PolicySection)
    evaluate: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            default = getattr(cls(), f.name)
            kw[f.name] = _section(type(default), d[f.name], f.name) if dataclasses.is_dataclass(default) \
                else d[f.name]
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def override(self, dotted: str, value: Any) -> "RunConfig":
        """Copy with one `section.key` value replaced."""
        d = self.to_dict()
        node = d
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
        return RunConfig.from_dict(d)

    def paper_scale(self) -> "RunConfig":
        """Full-size joint count and epoch limit."""
        return self.override("env.n_joints", 16).override("policy.epochs", 50000)

    def validate(self) -> None:
        p = self.preprocess
        if len(p.noise) != 4 or any(s < 0 for s in p.noise):
            raise ConfigError("preprocess.noise needs 4 non-negative sigmas")
        if not 0 < p.val_fraction < 1:
            raise ConfigError("preprocess.val_fraction must lie in (0, 1)")
        if self.policy.gamma < 0:
            raise ConfigError("policy.gamma must be non-negative")
        if self.env.sample_rate % p.control_rate:
            raise ConfigError("control rate must divide the sample rate")


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    defaults = cls()
    kw = {}
    for k, v in values.items():
        if isinstance(getattr(defaults, k), tuple):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
