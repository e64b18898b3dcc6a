"""Bundles the four networks, the noise schedule, and their hyper-parameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .nets import FeatureNet, FieldMLP, GeneratorNet, ShaderNet
from .schedule import NoiseSchedule, make_linear_schedule


@dataclass
class ModelConfig:
    image_size: int = 64
    feat_dim: int = 32
    illum_dim: int = 16
    base_width: int = 16
    field_width: int = 128
    field_hidden: int = 5
    fourier_bands: int = 6
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    mc_res_coarse: int = 96
    mc_res_fine: int = 160
    mc_coarse_above_t: int = 500
    trace_steps: int = 30
    trace_eps: float = 1e-3

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class SurfDiffModel:
    """Feature extractor g, field f, shader s, generator h, plus the schedule."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        self.fnet = FeatureNet(
            rng, feat_dim=config.feat_dim, illum_dim=config.illum_dim, base=config.base_width
        )
        self.field = FieldMLP(
            rng,
            feat_dim=config.feat_dim,
            width=config.field_width,
            hidden_layers=config.field_hidden,
            bands=config.fourier_bands,
        )
        self.shader = ShaderNet(rng, illum_dim=config.illum_dim)
        self.gen = GeneratorNet(rng, feat_dim=config.feat_dim, base=config.base_width)
        self.sched: NoiseSchedule = make_linear_schedule(
            config.diffusion_steps, config.beta_start, config.beta_end
        )

    def parameters(self):
        for prefix, mod in (
            ("g", self.fnet),
            ("f", self.field),
            ("s", self.shader),
            ("h", self.gen),
        ):
            for name, p in mod.parameters():
                yield f"{prefix}.{name}", p

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))[:3]
            extra = sorted(set(state) - set(own))[:3]
            raise KeyError(f"parameter name mismatch (missing {missing}, extra {extra})")
        for name, p in own.items():
            p.data = np.asarray(state[name], dtype=p.data.dtype).reshape(p.data.shape)

    def mc_resolution(self, t: int) -> int:
        return self.config.mc_res_coarse if t >= self.config.mc_coarse_above_t else self.config.mc_res_fine

    def save(self, path: str, meta: dict | None = None):
        full_meta = {"config": self.config.to_json()}
        if meta:
            full_meta.update(meta)
        gc.save_checkpoint(path, self.state_dict(), meta=full_meta)

    @staticmethod
    def load(path: str):
        arrays, meta = gc.load_checkpoint(path)
        config = ModelConfig.from_json(meta["config"])
        model = SurfDiffModel(config, seed=0)
        model.load_state_dict(arrays)
        return model, meta
