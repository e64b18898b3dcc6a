"""Declarative run configuration: every tunable in one INI file.

Sections: [run], [data], [schedule], [model], [train], [weights], [policy].
Unknown sections or keys are rejected; the resolved configuration (defaults
included) is written into every run directory for provenance.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields

from .camera import Camera
from .hybrid import DenoisePolicy
from .model import ModelConfig
from .train import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_count: int = 2048
    eval_count: int = 128
    resolution: int = 64
    base_seed: int = 1000
    eval_seed: int = 500000
    ambiguous_eval: bool = True
    camera_extent: float = 1.0
    camera_near: float = -1.5
    camera_far: float = 1.5

    def camera(self) -> Camera:
        return Camera(
            width=self.resolution,
            height=self.resolution,
            half_extent=self.camera_extent,
            near=self.camera_near,
            far=self.camera_far,
        )


@dataclass
class RunSettings:
    workers: int = 0  # 0: use the logical core count
    seed: int = 0


@dataclass
class PolicyConfig:
    render_every: str = "final"  # "final" or an integer literal
    ddim_steps: int = 100
    eta: float = 0.0
    guidance_weight: float = 0.0

    def policy(self) -> DenoisePolicy:
        re = self.render_every
        return DenoisePolicy(
            render_every="final" if re == "final" else int(re),
            ddim_steps=self.ddim_steps,
            eta=self.eta,
            guidance_weight=self.guidance_weight,
        )


# [schedule] keys live on ModelConfig; this maps section/key -> dataclass
_SCHEDULE_KEYS = {"diffusion_steps", "beta_start", "beta_end"}


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if self.model.image_size != self.data.resolution:
            self.model.image_size = self.data.resolution

    def sections(self) -> dict:
        model_d = asdict(self.model)
        sched = {k: model_d.pop(k) for k in sorted(_SCHEDULE_KEYS)}
        return {
            "run": asdict(self.run),
            "data": asdict(self.data),
            "schedule": sched,
            "model": model_d,
            "train": asdict(self.train),
            "weights": asdict(self.weights),
            "policy": asdict(self.policy),
        }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, values in self.sections().items():
            cp[section] = {k: str(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            f.write(self.to_ini())
        os.replace(tmp, path)


_SECTION_TYPES = {
    "run": RunSettings,
    "data": DataConfig,
    "train": TrainConfig,
    "weights": LossWeights,
    "policy": PolicyConfig,
}


def _parse_value(raw: str, pytype):
    if pytype is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    return raw


def from_ini(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = RunConfig()
    known_sections = set(cfg.sections().keys())
    for section in cp.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section [{section}]")
        if section == "schedule":
            target = cfg.model
            ftypes = {f.name: f.type for f in fields(ModelConfig)}
            allowed = _SCHEDULE_KEYS
        elif section == "model":
            target = cfg.model
            ftypes = {f.name: f.type for f in fields(ModelConfig)}
            allowed = set(ftypes) - _SCHEDULE_KEYS
        else:
            target = getattr(cfg, section)
            ftypes = {f.name: f.type for f in fields(_SECTION_TYPES[section])}
            allowed = set(ftypes)
        for key, raw in cp[section].items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            current = getattr(target, key)
            pytype = type(current) if current is not None else str
            setattr(target, key, _parse_value(raw, pytype))
    cfg.model.image_size = cfg.data.resolution
    try:
        LossWeights(**asdict(cfg.weights))
        cfg.policy.policy()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return from_ini(f.read())
