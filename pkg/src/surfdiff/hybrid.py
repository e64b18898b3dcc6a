"""Hybrid denoising: a learned generator stands in for rendering at most steps.

Each reverse step estimates the clean observation set either by actually
reconstructing and rendering the implicit surface (slow, true 3D) or by one
generator pass over the pixel-aligned features (fast).  The final step always
reconstructs the surface; its mesh is the 3D sample, and rasterization is
skipped there since the generator already supplies the observation estimate.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .fields import ImplicitSurface, PixelFeatures, extract_features
from .gradcore import Tensor
from .model import SurfDiffModel
from .nets import time_embedding
from .render import ObservationSet, marching_cubes, rasterize, save_observation
from .camera import Camera
from .render.meshing import Mesh, empty_mesh
from .schedule import ddim_step, ddim_timesteps

log = logging.getLogger(__name__)


class HybridError(ValueError):
    pass


@dataclass
class DenoisePolicy:
    render_every: int | str = "final"  # positive int, or "final"
    ddim_steps: int = 100
    eta: float = 0.0
    guidance_weight: float = 0.0

    def __post_init__(self):
        if isinstance(self.render_every, str):
            if self.render_every != "final":
                raise HybridError(
                    f"render_every must be an int or 'final', got {self.render_every!r}"
                )
        elif self.render_every < 1:
            raise HybridError("render_every must be >= 1")
        if self.ddim_steps < 1:
            raise HybridError("ddim_steps must be >= 1")
        if self.guidance_weight < 0:
            raise HybridError("guidance_weight must be >= 0")

    def render_indices(self, n_steps: int) -> set:
        """0-based step indices (0 is t=T) that use the render path, counted
        from the end so a periodic policy always lands on the final step."""
        if self.render_every == "final":
            return {n_steps - 1}
        return {i for i in range(n_steps) if (n_steps - 1 - i) % self.render_every == 0}

    def label(self) -> str:
        return "final" if self.render_every == "final" else f"every{self.render_every}"


@dataclass
class TrajectoryStep:
    t: int
    path: str  # "render" | "generate" | "render-fallback"
    seconds: float


@dataclass
class Trajectory:
    steps: list
    seconds_total: float
    render_calls: int
    generate_calls: int
    policy_corrected: bool = False

    def summary(self) -> dict:
        return {
            "steps": len(self.steps),
            "seconds_total": self.seconds_total,
            "render_calls": self.render_calls,
            "generate_calls": self.generate_calls,
            "policy_corrected": self.policy_corrected,
        }


@dataclass
class SampleResult:
    seed: int
    mesh: Mesh
    observation: ObservationSet
    trajectory: Trajectory
    surface: ImplicitSurface | None = None


def generate_estimate(model: SurfDiffModel, features: PixelFeatures, t) -> np.ndarray:
    """x0 estimate from the generator network: (B,H,W,14) in [-1,1]."""
    b = features.map.shape[0]
    temb = Tensor(time_embedding(np.broadcast_to(np.asarray(t), (b,)), dtype=features.map.dtype))
    out = model.gen(features.map, temb)
    return np.ascontiguousarray(out.data.transpose(0, 2, 3, 1))


def masked_noise(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    """x_T: unit Gaussian inside the silhouette, background constant outside."""
    h, w = mask.shape
    eps = rng.standard_normal((h, w, 14)).astype(np.float32)
    m = mask.astype(np.float32)[:, :, None]
    return eps * m - (1.0 - m)


def _lane_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(3,)))


def _single_surface(model, feats: PixelFeatures, b: int, camera: Camera) -> ImplicitSurface:
    return ImplicitSurface(
        field=model.field,
        features=PixelFeatures(map=feats.map[b : b + 1], illum=feats.illum[b : b + 1]),
        camera=camera,
    )


def _render_estimate(model, surf: ImplicitSurface, t: int):
    """Marching cubes + rasterization; (None, mesh) when no surface exists."""
    mesh = marching_cubes(surf, model.mc_resolution(t))
    if mesh.empty:
        return None, mesh
    return rasterize(mesh, surf.camera).channels, mesh


def denoise_batch(
    model: SurfDiffModel,
    camera: Camera,
    image: np.ndarray | None,
    silhouette: np.ndarray | None,
    policy: DenoisePolicy,
    seeds: list,
    collect_surface: bool = False,
    dump_dir: str | None = None,
) -> list:
    """Independent reverse trajectories, one per seed, sharing network batches.

    Per-lane noise comes from that lane's own generator, so the results do
    not depend on how many lanes run together.  image is (H,W,3|4) in [0,1]
    or None (unconditional: learned null condition + user silhouette).
    Returns SampleResult list ordered like `seeds`.
    """
    if image is None and silhouette is None:
        raise HybridError("unconditional sampling requires a silhouette mask")
    if silhouette is None:
        if image.shape[-1] < 4:
            raise HybridError("image has no alpha channel; supply a silhouette")
        silhouette = image[..., 3] > 0.5
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(set(seeds)):
        raise HybridError("seeds must be distinct")
    batch = len(seeds)
    mask = np.asarray(silhouette, dtype=bool)
    h, w = mask.shape
    img_rgb = None
    if image is not None:
        img_rgb = np.repeat(image[..., :3].astype(np.float32)[None], batch, axis=0)
    mask_b = np.repeat(mask[None], batch, axis=0)

    sched = model.sched
    ts = ddim_timesteps(sched.T, policy.ddim_steps)
    n_steps = len(ts)
    render_set = policy.render_indices(n_steps)
    corrected = (n_steps - 1) not in render_set
    if corrected:
        log.warning("policy %s does not cover the final step; forcing a final render", policy)
        render_set.add(n_steps - 1)

    rngs = [_lane_rng(s) for s in seeds]
    x = np.stack([masked_noise(r, mask) for r in rngs], axis=0)
    m_f = mask.astype(np.float32)[None, :, :, None]

    meshes = [empty_mesh() for _ in range(batch)]
    surfaces = [None] * batch
    render_calls = np.zeros(batch, dtype=int)
    generate_calls = np.zeros(batch, dtype=int)
    steps_log = [[] for _ in range(batch)]
    dump_index = []
    t_start = time.perf_counter()

    for i, t in enumerate(ts):
        step_t0 = time.perf_counter()
        t_prev = ts[i + 1] if i + 1 < n_steps else 0
        final = i == n_steps - 1
        feats = extract_features(model.fnet, x, img_rgb, t, mask_b)
        feats_unc = None
        if policy.guidance_weight > 0 and img_rgb is not None:
            feats_unc = extract_features(model.fnet, x, None, t, mask_b)

        paths = ["generate"] * batch
        if i in render_set:
            x0_hat = np.empty_like(x)
            gen_full = None
            for b in range(batch):
                surf = _single_surface(model, feats, b, camera)
                if final:
                    # reconstruct the 3D sample; omit rasterization at the end
                    meshes[b] = marching_cubes(surf, model.mc_resolution(t))
                    if collect_surface:
                        surfaces[b] = surf
                    if gen_full is None:
                        gen_full = generate_estimate(model, feats, t)
                    x0_hat[b] = gen_full[b]
                    paths[b] = "render"
                    render_calls[b] += 1
                    generate_calls[b] += 1
                else:
                    est, _ = _render_estimate(model, surf, t)
                    if est is None:
                        # early fields may lack a zero crossing; fall back
                        if gen_full is None:
                            gen_full = generate_estimate(model, feats, t)
                        x0_hat[b] = gen_full[b]
                        paths[b] = "render-fallback"
                        generate_calls[b] += 1
                    else:
                        x0_hat[b] = est
                        paths[b] = "render"
                        render_calls[b] += 1
        else:
            x0_hat = generate_estimate(model, feats, t)
            generate_calls += 1

        if feats_unc is not None:
            # guidance extrapolates toward the conditional estimate on
            # whichever path produced x0_hat; the unconditional side uses the
            # generator (cheap and defined at every step)
            x0_unc = generate_estimate(model, feats_unc, t)
            x0_hat = x0_unc + policy.guidance_weight * (x0_hat - x0_unc)
        np.clip(x0_hat, -1.0, 1.0, out=x0_hat)

        if policy.eta > 0:
            noise = np.stack(
                [r.standard_normal((h, w, 14)).astype(np.float32) for r in rngs], axis=0
            )
        else:
            noise = None
        x = ddim_step(x, x0_hat, t, t_prev, policy.eta, sched, noise=noise).astype(np.float32)
        x = x * m_f - (1.0 - m_f)

        dt = time.perf_counter() - step_t0
        for b in range(batch):
            steps_log[b].append(TrajectoryStep(t=t, path=paths[b], seconds=dt / batch))
        if dump_dir is not None:
            os.makedirs(dump_dir, exist_ok=True)
            for b in range(batch):
                obs_step = ObservationSet(channels=x0_hat[b].astype(np.float32), mask=mask)
                prefix = os.path.join(dump_dir, f"s{b:02d}_t{t:04d}_")
                save_observation(obs_step, prefix, camera)
                dump_index.append(
                    {"item": b, "t": t, "prefix": os.path.basename(prefix), "path": paths[b]}
                )

    total = time.perf_counter() - t_start
    if dump_dir is not None:
        with open(os.path.join(dump_dir, "trajectory.json"), "w") as f:
            json.dump(dump_index, f, indent=1)

    results = []
    for b, s in enumerate(seeds):
        obs = ObservationSet(channels=x[b].copy(), mask=mask.copy())
        traj = Trajectory(
            steps=steps_log[b],
            seconds_total=total / batch,
            render_calls=int(render_calls[b]),
            generate_calls=int(generate_calls[b]),
            policy_corrected=corrected,
        )
        results.append(
            SampleResult(seed=s, mesh=meshes[b], observation=obs, trajectory=traj,
                         surface=surfaces[b])
        )
    return results


def denoise(
    model: SurfDiffModel,
    camera: Camera,
    image: np.ndarray | None,
    silhouette: np.ndarray | None,
    policy: DenoisePolicy,
    seed: int,
    collect_surface: bool = False,
    dump_dir: str | None = None,
) -> SampleResult:
    """Single trajectory; the final mesh is the 3D sample."""
    return denoise_batch(
        model, camera, image, silhouette, policy, [seed],
        collect_surface=collect_surface, dump_dir=dump_dir,
    )[0]


def sample_many(
    model: SurfDiffModel,
    camera: Camera,
    image: np.ndarray | None,
    silhouette: np.ndarray | None,
    policy: DenoisePolicy,
    seeds: list,
    batched: bool = True,
    collect_surface: bool = False,
) -> list:
    """Independent trajectories per seed, ordered by the seed list.

    batched=False runs lanes sequentially for honest per-sample timing;
    results are identical either way (per-lane noise generators)."""
    if len(seeds) < 1:
        raise HybridError("need at least one seed")
    if batched:
        return denoise_batch(model, camera, image, silhouette, policy, seeds,
                             collect_surface=collect_surface)
    out = []
    for s in seeds:
        out.append(denoise(model, camera, image, silhouette, policy, int(s),
                           collect_surface=collect_surface))
    return out
