"""Sphere tracing of implicit surfaces, with a differentiable hit relation.

The march itself runs on raw arrays (each step advances by the queried
distance; a ray terminates on |d| < eps_hit, after K steps, or on leaving
the [near, far] slab).  For training, the converged hit depth is re-expressed
through the implicit relation

    depth = depth0 - d(o + depth0 * v) / (grad d . v)|_detached

so gradients reach the field parameters through a single taped query instead
of the unrolled march.  Albedo and normals are then queried at the live hit
point, which keeps their chain to the depth intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import gradcore as gc
from ..gradcore import Tensor
from ..fields import ImplicitSurface, field_eval_np, query_field
from ..camera import Camera
from .observation import BACKGROUND, ObservationSet, pack_observation

TRACE_MAX_STEPS = 30
TRACE_EPS_HIT = 1e-3
_DENOM_FLOOR = 1e-2


class RenderError(ValueError):
    pass


def sphere_trace(
    sdf_fn,
    camera: Camera,
    pixels_uv: np.ndarray | None = None,
    direction: str = "front",
    max_steps: int = TRACE_MAX_STEPS,
    eps_hit: float = TRACE_EPS_HIT,
):
    """March rays for the given pixels; returns depths from the near plane.

    sdf_fn maps (N,3) points to (N,) signed distances.  Front rays start on
    the near plane and march along +view; back rays start on the far plane
    and march along -view (the inverted z-buffer).  Missed rays report the
    full slab depth.

    Returns dict with t (N,), hit (N,), points (N,3), steps (N,).
    """
    if max_steps < 1 or eps_hit <= 0:
        raise RenderError("need max_steps >= 1 and eps_hit > 0")
    if direction not in ("front", "back"):
        raise RenderError(f"unknown trace direction {direction!r}")
    origins, view = camera.pixel_rays(pixels_uv)
    origins = origins.reshape(-1, 3)
    span = camera.depth_range
    if direction == "back":
        origins = origins + span * view
        ray_dir = -view
    else:
        ray_dir = view

    n = origins.shape[0]
    t = np.zeros(n, dtype=origins.dtype)
    hit = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int32)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pos = origins[idx] + t[idx, None] * ray_dir
        d = np.asarray(sdf_fn(pos))
        converged = np.abs(d) < eps_hit
        hit_idx = idx[converged]
        hit[hit_idx] = True
        active[hit_idx] = False
        adv = idx[~converged]
        t[adv] += np.abs(d[~converged])
        steps[adv] += 1
        escaped = adv[t[adv] > span]
        active[escaped] = False
    t = np.minimum(t, span)
    t[~hit] = span
    points = origins + t[:, None] * ray_dir
    return {"t": t, "hit": hit, "points": points, "steps": steps, "ray_dir": ray_dir,
            "origins": origins}


def _surface_sdf_fn(surf: ImplicitSurface):
    return lambda pts: field_eval_np(surf, pts)["d"]


@dataclass
class TracedView:
    """Differentiable per-pixel quantities for one trace direction."""

    hit: np.ndarray  # (N,) bool
    z_cam: Tensor | None  # (M,) camera-frame z of hits, on tape
    albedo: Tensor | None  # (M,3) in [0,1]
    normal_cam: Tensor | None  # (M,3) unit, camera frame
    normal_world: Tensor | None  # (M,3) unit, world frame


def trace_view(
    surf: ImplicitSurface,
    pixels_uv: np.ndarray,
    direction: str,
    max_steps: int = TRACE_MAX_STEPS,
    eps_hit: float = TRACE_EPS_HIT,
) -> TracedView:
    """Trace one direction and lift the hits onto the tape."""
    camera = surf.camera
    tr = sphere_trace(_surface_sdf_fn(surf), camera, pixels_uv, direction, max_steps, eps_hit)
    hit = tr["hit"]
    m = int(hit.sum())
    if m == 0:
        return TracedView(hit=hit, z_cam=None, albedo=None, normal_cam=None, normal_world=None)
    dtype = surf.features.map.dtype
    p0 = tr["points"][hit].astype(dtype)
    ray_dir = tr["ray_dir"].astype(dtype)
    t0 = tr["t"][hit].astype(dtype)

    grad0 = field_eval_np(surf, p0, want_grad=True)["grad"]
    denom = grad0 @ ray_dir
    denom = np.sign(denom) * np.maximum(np.abs(denom), _DENOM_FLOOR)
    denom[denom == 0] = _DENOM_FLOOR

    d0, _ = query_field(p0[None], surf)
    t_live = Tensor(t0) - d0.reshape(m) / Tensor(denom.astype(dtype))
    origins = tr["origins"][hit].astype(dtype)
    p_live = Tensor(origins) + t_live.reshape(m, 1) * Tensor(ray_dir.reshape(1, 3))

    _, albedo, grad = query_field(p_live.reshape(1, m, 3), surf, want_tangents=True)
    grad = grad.reshape(m, 3)
    norm = gc.sqrt((grad * grad).sum(axis=-1) + 1e-12)
    n_world = grad / norm.reshape(m, 1)
    basis = camera.basis().astype(dtype)
    n_cam = n_world @ Tensor(basis.T)

    span = camera.depth_range
    if direction == "front":
        z_cam = t_live + camera.near
    else:
        z_cam = Tensor(np.full(m, camera.near + span, dtype=dtype)) - t_live
    return TracedView(hit=hit, z_cam=z_cam, albedo=albedo.reshape(m, 3),
                      normal_cam=n_cam, normal_world=n_world)


@dataclass
class PatchRender:
    """Partial observation set rendered by tracing a pixel patch."""

    origin: tuple  # (row, col) of the patch in the full image
    size: int
    front: TracedView
    back: TracedView
    channels: np.ndarray  # (size, size, 14) detached values, background filled
    mask: np.ndarray  # (size, size) front hits

    def channel_tensors(self):
        """Flat per-pixel taped channels plus their pixel indices.

        Returns (values (M,14) Tensor, flat pixel indices (M,)) for hit
        pixels where both directions produced taped quantities."""
        return self._tensors

    def set_tensors(self, values, idx):
        self._tensors = (values, idx)


def patch_pixels_uv(camera: Camera, origin: tuple, size: int) -> np.ndarray:
    """Normalized coords of a size x size pixel block at origin (row, col)."""
    r0, c0 = origin
    if r0 < 0 or c0 < 0 or r0 + size > camera.height or c0 + size > camera.width:
        raise RenderError(f"patch {origin}+{size} exceeds {camera.height}x{camera.width}")
    full = camera.pixel_centers_uv()
    return full[r0 : r0 + size, c0 : c0 + size]


def render_patch(
    surf: ImplicitSurface,
    origin: tuple,
    size: int = 32,
    max_steps: int = TRACE_MAX_STEPS,
    eps_hit: float = TRACE_EPS_HIT,
) -> PatchRender:
    """Differentiable patch render: all six channel groups via sphere tracing."""
    camera = surf.camera
    uv = patch_pixels_uv(camera, origin, size)
    front = trace_view(surf, uv, "front", max_steps, eps_hit)
    back = trace_view(surf, uv, "back", max_steps, eps_hit)
    n = size * size
    dtype = surf.features.map.dtype

    both = front.hit & back.hit
    channels = np.full((n, 14), BACKGROUND, dtype=dtype)
    tensor_parts = []
    if both.any():
        sel_f = both[front.hit]  # mask over front-hit list
        sel_b = both[back.hit]
        a_f = front.albedo[np.flatnonzero(sel_f)]
        a_b = back.albedo[np.flatnonzero(sel_b)]
        zc_f = front.z_cam[np.flatnonzero(sel_f)]
        zc_b = back.z_cam[np.flatnonzero(sel_b)]
        nf = front.normal_cam[np.flatnonzero(sel_f)]
        nb = back.normal_cam[np.flatnonzero(sel_b)]
        span = camera.depth_range
        depth_f = (zc_f - camera.near) * (2.0 / span) - 1.0
        depth_b = (zc_b - camera.near) * (2.0 / span) - 1.0
        vals = gc.concat(
            [a_f * 2.0 - 1.0, a_b * 2.0 - 1.0, nf, nb,
             depth_f.reshape(-1, 1), depth_b.reshape(-1, 1)],
            axis=1,
        )
        idx = np.flatnonzero(both)
        channels[idx] = vals.data
        tensor_parts = (vals, idx)
    else:
        tensor_parts = (None, np.zeros(0, dtype=np.int64))

    patch = PatchRender(
        origin=origin,
        size=size,
        front=front,
        back=back,
        channels=channels.reshape(size, size, 14),
        mask=both.reshape(size, size),
    )
    patch.set_tensors(*tensor_parts)
    return patch
