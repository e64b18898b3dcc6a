"""Joint training of the feature extractor, field, shader, and generator.

The objective mixes the two denoising losses (patch-rendered and generated),
shaded-image consistency for both paths, deterministic 3D supervision at
points sampled from the exact shape oracle, and the Eikonal regularizer.
All per-step randomness is derived from (seed, step), so interrupted runs
resume bit-identically.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import Tape, Tensor
from .fields import extract_features, query_field, ImplicitSurface, PixelFeatures
from .hybrid import generate_estimate
from .model import ModelConfig, SurfDiffModel
from .nets import time_embedding
from .render import render_patch
from .camera import Camera
from .render.observation import NORMAL_F, ALBEDO_F
from .schedule import q_sample

log = logging.getLogger(__name__)

_INOUT_LOGIT_SCALE = 20.0


class TrainDivergence(RuntimeError):
    pass


@dataclass
class LossWeights:
    vlb_render: float = 1.0
    vlb_generate: float = 1.0
    shaded_render: float = 1.0
    shaded_generate: float = 1.0
    onsurf_sdf: float = 1.0
    onsurf_albedo: float = 0.2
    onsurf_normal: float = 0.2
    nearsurf_inout: float = 0.2
    nearsurf_albedo: float = 0.2
    eikonal: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return LossWeights(**d)

    TERMS = (
        "vlb_render", "vlb_generate", "shaded_render", "shaded_generate",
        "onsurf_sdf", "onsurf_albedo", "onsurf_normal",
        "nearsurf_inout", "nearsurf_albedo", "eikonal",
    )


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    patch_size: int = 32
    points_on: int = 128
    points_near: int = 128
    points_box: int = 128
    near_noise_scale: float = 0.1  # 5% of the bounding-box extent
    drop_condition_prob: float = 0.2
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    divergence_factor: float = 1e3

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(d):
        return TrainConfig(**d)


def sample_supervision_points(oracle, n_on: int, n_near: int, noise_scale: float,
                              rng: np.random.Generator) -> dict:
    """Exact on-surface points, noisy near-surface points, and their labels."""
    on = oracle.surface_points(rng, n_on)
    near_base = oracle.surface_points(rng, n_near)
    near = near_base + rng.normal(0.0, noise_scale, size=near_base.shape)
    near = np.clip(near, -0.98, 0.98)
    return {
        "on": on,
        "on_normal": oracle.normal(on),
        "on_albedo": oracle.albedo(on),
        "near": near,
        "near_inside": (oracle.sdf(near) < 0).astype(np.float64),
        "near_albedo": oracle.albedo(oracle.project_to_surface(near)),
    }


def draw_step_randomness(rng: np.random.Generator, n_items: int, dataset_size: int,
                         model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    """Batch indices, timesteps, noise, condition drops, and patch origins."""
    hw = model_cfg.image_size
    ps = train_cfg.patch_size
    return {
        "indices": rng.integers(0, dataset_size, size=n_items),
        "t": rng.integers(1, model_cfg.diffusion_steps + 1, size=n_items),
        "eps": rng.standard_normal((n_items, hw, hw, 14)).astype(np.float32),
        "drop": (rng.uniform(size=n_items) < train_cfg.drop_condition_prob).astype(np.float64),
        "origins": rng.integers(0, hw - ps + 1, size=(n_items, 2)),
    }


def draw_supervision(rng: np.random.Generator, oracles, train_cfg: TrainConfig) -> list:
    """Per-item 3D supervision draws; call after the batch oracles are known."""
    out = []
    for oracle in oracles:
        pts = sample_supervision_points(
            oracle, train_cfg.points_on, train_cfg.points_near,
            train_cfg.near_noise_scale, rng,
        )
        pts["box"] = rng.uniform(-1.0, 1.0, size=(train_cfg.points_box, 3))
        out.append(pts)
    return out


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    err = pred - Tensor(target.astype(pred.dtype))
    return (err * err).mean()


def total_loss(
    model: SurfDiffModel,
    camera: Camera,
    batch: dict,
    draws: dict,
    weights: LossWeights,
    train_cfg: TrainConfig,
) -> tuple:
    """Weighted objective and the per-term breakdown.

    batch: x0 (B,H,W,14), image (B,H,W,3) in [0,1], mask (B,H,W),
    oracles (list, possibly None entries).  draws: see draw_step_randomness.
    Must run under an active Tape.
    """
    x0 = batch["x0"]
    b, h, w, _ = x0.shape
    ts = draws["t"]
    ab = model.sched.alpha_bar[ts].astype(np.float32).reshape(b, 1, 1, 1)
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * draws["eps"]

    feats = extract_features(model.fnet, xt, batch["image"], ts, batch["mask"],
                             drop=draws["drop"])
    temb = Tensor(time_embedding(ts, dtype=np.float32))

    terms = {}
    zero = Tensor(np.zeros((), dtype=np.float32))

    # (b) full-resolution generated denoising loss
    x0_nchw = np.ascontiguousarray(x0.transpose(0, 3, 1, 2))
    gen = model.gen(feats.map, temb)
    terms["vlb_generate"] = _mse(gen, x0_nchw)

    # (a) patch-rendered denoising loss + (c) shaded render consistency
    ps = train_cfg.patch_size
    live_sq = zero
    const_sq = 0.0
    shaded_r = zero
    shaded_px = 0
    for i in range(b):
        surf = ImplicitSurface(
            field=model.field,
            features=PixelFeatures(map=feats.map[i : i + 1], illum=feats.illum[i : i + 1]),
            camera=camera,
        )
        r0, c0 = draws["origins"][i]
        patch = render_patch(surf, (int(r0), int(c0)), ps,
                             max_steps=model.config.trace_steps,
                             eps_hit=model.config.trace_eps)
        gt_patch = x0[i, r0 : r0 + ps, c0 : c0 + ps].reshape(-1, 14)
        vals, idx = patch.channel_tensors()
        hit_flat = patch.mask.reshape(-1)
        const_sq += float(np.sum((patch.channels.reshape(-1, 14)[~hit_flat]
                                  - gt_patch[~hit_flat]) ** 2))
        if vals is not None:
            err = vals - Tensor(gt_patch[idx].astype(np.float32))
            live_sq = live_sq + (err * err).sum()
        # shaded consistency on front-hit pixels that are also valid in I
        fr = patch.front
        if fr.albedo is not None:
            gt_mask_patch = batch["mask"][i, r0 : r0 + ps, c0 : c0 + ps].reshape(-1)
            sel = gt_mask_patch[fr.hit]
            if sel.any():
                pick = np.flatnonzero(sel)
                alb = fr.albedo[pick]
                nrm = fr.normal_cam[pick]
                m = int(len(pick))
                illum_rep = feats.illum[i : i + 1] * Tensor(np.ones((m, 1), np.float32))
                s_coef = model.shader(nrm, illum_rep)
                c_pred = alb * s_coef
                img_patch = batch["image"][i, r0 : r0 + ps, c0 : c0 + ps].reshape(-1, 3)
                gt_rgb = img_patch[fr.hit][sel]
                errc = c_pred - Tensor(gt_rgb.astype(np.float32))
                shaded_r = shaded_r + (errc * errc).sum()
                shaded_px += m * 3
    denom = b * ps * ps * 14
    terms["vlb_render"] = live_sq * (1.0 / denom) + float(const_sq / denom)
    terms["shaded_render"] = (
        shaded_r * (1.0 / shaded_px) if shaded_px else zero
    )

    # (d) shaded consistency for the generated path, full resolution
    gt_mask = batch["mask"].astype(bool)
    if gt_mask.any():
        gen_hw = gen.transpose(0, 2, 3, 1)
        alb_g = (gen_hw[..., ALBEDO_F][gt_mask] + 1.0) * 0.5
        n_g = gen_hw[..., NORMAL_F][gt_mask]
        nrm = gc.sqrt((n_g * n_g).sum(axis=-1) + 1e-8)
        n_unit = n_g / nrm.reshape(-1, 1)
        illum_rows = []
        for i in range(b):
            cnt = int(gt_mask[i].sum())
            if cnt:
                illum_rows.append(feats.illum[i : i + 1] * Tensor(np.ones((cnt, 1), np.float32)))
        s_gen = model.shader(n_unit, gc.concat(illum_rows, axis=0))
        c_gen = alb_g * s_gen
        terms["shaded_generate"] = _mse(c_gen, batch["image"][gt_mask])
    else:
        terms["shaded_generate"] = zero

    # deterministic 3D terms, skipped without an oracle
    have_oracle = [i for i in range(b) if batch["oracles"][i] is not None]
    if len(have_oracle) < b:
        log.warning("missing shape oracle on %d items; skipping 3D losses there",
                    b - len(have_oracle))
    if have_oracle:
        n_on = train_cfg.points_on
        n_near = train_cfg.points_near
        n_box = train_cfg.points_box
        pts = np.stack(
            [
                np.concatenate([draws["points"][i][k] for k in ("on", "near", "box")])
                for i in have_oracle
            ]
        ).astype(np.float32)
        sel_feats = PixelFeatures(
            map=gc.concat([feats.map[i : i + 1] for i in have_oracle], axis=0),
            illum=gc.concat([feats.illum[i : i + 1] for i in have_oracle], axis=0),
        )
        surf_all = ImplicitSurface(field=model.field, features=sel_feats, camera=camera)
        d, albedo, grad = query_field(pts, surf_all, want_tangents=True)

        d_on = d[:, :n_on]
        terms["onsurf_sdf"] = gc.abs_(d_on).mean()
        alb_on = albedo[:, :n_on]
        gt_alb = np.stack([draws["points"][i]["on_albedo"] for i in have_oracle])
        terms["onsurf_albedo"] = _mse(alb_on, gt_alb)
        g_on = grad[:, :n_on]
        gt_n = np.stack([draws["points"][i]["on_normal"] for i in have_oracle]).astype(np.float32)
        g_norm = gc.sqrt((g_on * g_on).sum(axis=-1) + 1e-8)
        cos = (g_on * Tensor(gt_n)).sum(axis=-1) / g_norm
        terms["onsurf_normal"] = (1.0 - cos).mean()

        d_near = d[:, n_on : n_on + n_near]
        y = np.stack([draws["points"][i]["near_inside"] for i in have_oracle]).astype(np.float32)
        z = d_near * (-_INOUT_LOGIT_SCALE)
        terms["nearsurf_inout"] = (gc.softplus(z) - z * Tensor(y)).mean()
        alb_near = albedo[:, n_on : n_on + n_near]
        gt_nn = np.stack([draws["points"][i]["near_albedo"] for i in have_oracle])
        terms["nearsurf_albedo"] = _mse(alb_near, gt_nn)

        g_box = grad[:, n_on + n_near :]
        gn = gc.sqrt((g_box * g_box).sum(axis=-1) + 1e-12)
        terms["eikonal"] = ((gn - 1.0) * (gn - 1.0)).mean()
    else:
        for k in ("onsurf_sdf", "onsurf_albedo", "onsurf_normal",
                  "nearsurf_inout", "nearsurf_albedo", "eikonal"):
            terms[k] = zero

    wmap = weights.to_json()
    total = zero
    for name in LossWeights.TERMS:
        if wmap[name] != 0.0:
            total = total + terms[name] * wmap[name]
    breakdown = {name: float(terms[name].data) for name in LossWeights.TERMS}
    return total, breakdown


class ExampleBank:
    """Batch source over an in-memory or lazily loaded dataset."""

    def __init__(self, examples=None, index=None, cache_limit: int = 64):
        self._examples = examples
        self._index = index
        self._cache = {}
        self._cache_limit = cache_limit
        if examples is None and index is None:
            raise ValueError("need examples or a dataset index")

    def __len__(self):
        return len(self._examples) if self._examples is not None else len(self._index)

    def get(self, i: int):
        if self._examples is not None:
            return self._examples[i]
        if i in self._cache:
            return self._cache[i]
        ex = self._index.load(i)
        if len(self._cache) < self._cache_limit:
            self._cache[i] = ex
        return ex

    def batch(self, indices) -> dict:
        exs = [self.get(int(i)) for i in indices]
        return {
            "x0": np.stack([e.obs.channels for e in exs]).astype(np.float32),
            "image": np.stack([e.image[..., :3] for e in exs]).astype(np.float32),
            "mask": np.stack([e.obs.mask for e in exs]),
            "oracles": [e.spec().oracle() for e in exs],
        }


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, step)))


def train_loop(
    model: SurfDiffModel,
    camera: Camera,
    bank: ExampleBank,
    train_cfg: TrainConfig,
    weights: LossWeights,
    run_dir: str,
    resume: bool = True,
) -> dict:
    """Optimize all four networks; writes checkpoints and a loss CSV.

    Returns {"checkpoint": path, "steps": n, "last": breakdown}."""
    os.makedirs(run_dir, exist_ok=True)
    ckpt_path = os.path.join(run_dir, "model.ckpt")
    opt_path = os.path.join(run_dir, "optimizer.ckpt")
    csv_path = os.path.join(run_dir, "loss.csv")

    params = list(model.parameters())
    opt = gc.Adam(params, lr=train_cfg.learning_rate,
                  beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2)
    start_step = 0
    if resume and os.path.exists(ckpt_path):
        arrays, meta = gc.load_checkpoint(ckpt_path)
        model.load_state_dict(arrays)
        start_step = int(meta.get("step", 0))
        if os.path.exists(opt_path):
            oarrays, _ = gc.load_checkpoint(opt_path)
            opt.load_state_dict(oarrays)
        log.info("resuming from step %d", start_step)
    _trim_csv(csv_path, start_step)

    rows = []
    initial_total = None
    breakdown = {}
    for step in range(start_step, train_cfg.steps):
        t0 = time.perf_counter()
        rng = step_rng(train_cfg.seed, step)
        draws = draw_step_randomness(rng, train_cfg.batch_size, len(bank),
                                     model.config, train_cfg)
        batch = bank.batch(draws["indices"])
        draws["points"] = draw_supervision(rng, batch["oracles"], train_cfg)
        model.zero_grad()
        with Tape() as tape:
            loss, breakdown = total_loss(model, camera, batch, draws, weights, train_cfg)
        tape.backward(loss)
        opt.step()
        total_val = float(loss.data)
        if initial_total is None:
            initial_total = max(total_val, 1e-8)
        if not np.isfinite(total_val) or total_val > train_cfg.divergence_factor * initial_total:
            _flush_rows(csv_path, rows)
            raise TrainDivergence(
                f"loss {total_val:.4g} at step {step} exceeds "
                f"{train_cfg.divergence_factor:.0f} x initial {initial_total:.4g}"
            )
        rows.append([step, total_val] + [breakdown[k] for k in LossWeights.TERMS]
                    + [time.perf_counter() - t0])
        if (step + 1) % train_cfg.log_every == 0 or step == train_cfg.steps - 1:
            _flush_rows(csv_path, rows)
            rows = []
        if (step + 1) % train_cfg.checkpoint_every == 0 or step == train_cfg.steps - 1:
            model.save(ckpt_path, meta={"step": step + 1})
            gc.save_checkpoint(opt_path, opt.state_dict(), meta={"step": step + 1})
        if (step + 1) % max(train_cfg.log_every * 10, 1) == 0:
            log.info("step %d total %.5f vlb_gen %.5f", step + 1, total_val,
                     breakdown["vlb_generate"])
    if rows:
        _flush_rows(csv_path, rows)
    if start_step >= train_cfg.steps and not os.path.exists(ckpt_path):
        model.save(ckpt_path, meta={"step": start_step})
    return {"checkpoint": ckpt_path, "steps": train_cfg.steps, "last": breakdown,
            "loss_csv": csv_path}


def _csv_header():
    return ["step", "total"] + list(LossWeights.TERMS) + ["seconds"]


def _flush_rows(csv_path: str, rows):
    new = not os.path.exists(csv_path)
    with open(csv_path, "a", newline="") as f:
        wr = csv.writer(f)
        if new:
            wr.writerow(_csv_header())
        wr.writerows(rows)


def _trim_csv(csv_path: str, keep_below_step: int):
    if not os.path.exists(csv_path):
        return
    with open(csv_path) as f:
        rdr = list(csv.reader(f))
    if not rdr:
        return
    head, body = rdr[0], rdr[1:]
    body = [r for r in body if r and int(r[0]) < keep_below_step]
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(head)
        wr.writerows(body)
