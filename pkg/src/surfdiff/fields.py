"""The image-and-noise-conditioned neural implicit surface.

A surface is the zero set of d(p) = f(enc(p), g_p) + box_continuation(p),
where g_p bilinearly samples the pixel-aligned feature map at the
orthographic projection of p.  Outside the [-1,1]^3 bounding box the field
is continued by the distance to the box, which guarantees that rays starting
outside march inward and terminate.

Two evaluation paths exist and must agree bit for bit inside the box:
the Tensor path (tape-recordable, with optional coordinate tangents for
spatial gradients) and a raw numpy path used by sphere-trace marching and
grid evaluation, where gradient tracking would only cost memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .gradcore import kernels as K
from .nets import FeatureNet, FieldMLP, ShaderNet, clip_t, time_embedding
from .camera import Camera

_EPS_DIST = 1e-12
_EPS_NORM = 1e-12
HALF_PI = math.pi / 2.0


class FieldError(ValueError):
    pass


@dataclass
class PixelFeatures:
    map: Tensor  # (B, F, H, W)
    illum: Tensor  # (B, L)


@dataclass
class ImplicitSurface:
    field: FieldMLP
    features: PixelFeatures
    camera: Camera
    box: float = 1.0


def extract_features(
    fnet: FeatureNet,
    xt: np.ndarray,
    image: np.ndarray | None,
    t: np.ndarray | int,
    mask: np.ndarray,
    drop: np.ndarray | None = None,
) -> PixelFeatures:
    """Run g on silhouette-masked inputs.

    xt (B,H,W,14) in [-1,1]; image (B,H,W,3) in [0,1] or None; mask (B,H,W).
    Outside the mask every input channel is the background constant -1.
    """
    xt = np.asarray(xt)
    if xt.ndim != 4 or xt.shape[-1] != 14:
        raise FieldError(f"expected xt (B,H,W,14), got {xt.shape}")
    b, h, w, _ = xt.shape
    m = np.asarray(mask, dtype=xt.dtype).reshape(b, h, w, 1)
    xt_in = xt * m - (1.0 - m)
    xt_t = Tensor(np.ascontiguousarray(xt_in.transpose(0, 3, 1, 2)))
    img_t = None
    if image is not None:
        image = np.asarray(image)
        if image.shape[:3] != (b, h, w):
            raise FieldError(f"image spatial shape {image.shape} != xt {xt.shape}")
        img_in = (2.0 * image[..., :3] - 1.0) * m - (1.0 - m)
        img_t = Tensor(np.ascontiguousarray(img_in.transpose(0, 3, 1, 2)).astype(xt.dtype))
    temb = Tensor(time_embedding(np.broadcast_to(np.asarray(t), (b,)), dtype=xt.dtype))
    feat, illum = fnet(xt_t, img_t, temb, drop=drop)
    return PixelFeatures(map=feat, illum=illum)


# ---------------------------------------------------------------------------
# Tensor path
# ---------------------------------------------------------------------------

def _fourier_bands(bands: int, dtype):
    return (math.pi * (2.0 ** np.arange(bands))).astype(dtype)


def _encode_t(q: Tensor, bands: int):
    """Fourier features of q (..., 3): [q, sin(a_j q), cos(a_j q), ...]."""
    parts = [q]
    for a in _fourier_bands(bands, q.dtype):
        parts.append(gc.sin(q * float(a)))
        parts.append(gc.sin(q * float(a) + HALF_PI))
    return gc.concat(parts, axis=-1)


def query_field(points, surf: ImplicitSurface, want_tangents: bool = False):
    """Evaluate the field at points (B,N,3) Tensor or array.

    Returns (d (B,N), albedo (B,N,3)) or, with tangents, additionally the
    spatial gradient (B,N,3); everything differentiable wrt parameters,
    features, and the points themselves.
    """
    p = points if isinstance(points, Tensor) else Tensor(points)
    if p.ndim != 3 or p.shape[-1] != 3:
        raise FieldError(f"points must be (B,N,3), got {p.shape}")
    if not np.all(np.isfinite(p.data)):
        raise FieldError("non-finite query point")
    b, n, _ = p.shape
    box = surf.box
    field = surf.field
    dtype = p.dtype

    q = clip_t(p, -box, box)
    r = p - q
    s = (r * r).sum(axis=-1)
    dist = gc.sqrt(s + _EPS_DIST) - math.sqrt(_EPS_DIST)

    m, off = surf.camera.uv_transform()
    m = m.astype(dtype)
    uv = q.reshape(b * n, 3) @ Tensor(m) + Tensor(off.astype(dtype))
    uv = uv.reshape(b, n, 2)
    g = gc.grid_sample(surf.features.map, uv)  # (B,N,F)

    enc = _encode_t(q, field.bands)
    x = gc.concat([enc, g], axis=-1).reshape(b * n, -1)

    if not want_tangents:
        d_net, albedo, _ = field.forward(x)
        d = d_net.reshape(b, n) + dist
        return d, albedo.reshape(b, n, 3)

    inside = (np.abs(p.data) < box).astype(dtype)  # (B,N,3) clamp Jacobian
    eye = np.eye(3, dtype=dtype)[:, None, None, :]  # (3,1,1,3)
    tx_parts = [Tensor(eye * inside[None])]  # identity tangent, masked
    for a in _fourier_bands(field.bands, dtype):
        cos_j = gc.sin(q * float(a) + HALF_PI) * float(a)
        msin_j = gc.sin(q * float(a)) * float(-a)
        tx_parts.append(Tensor(eye) * (cos_j * Tensor(inside)))
        tx_parts.append(Tensor(eye) * (msin_j * Tensor(inside)))
    tx_enc = gc.concat(tx_parts, axis=-1)  # (3,B,N,E)

    uv_np = np.ascontiguousarray(uv.data)
    tg = []
    for k in range(3):
        tuv = inside[..., k : k + 1] * m[k][None, None, :]
        tg.append(gc.grid_sample_jvp(surf.features.map, uv_np, Tensor(tuv)))
    tg_t = gc.stack(tg, axis=0)  # (3,B,N,F)

    tx = gc.concat([tx_enc, tg_t], axis=-1).reshape(3, b * n, -1)
    d_net, albedo, dd = field.forward_with_tangent(x, tx)
    d = d_net.reshape(b, n) + dist
    grad = dd.reshape(3, b, n).transpose(1, 2, 0) + r / gc.sqrt(s + _EPS_DIST).reshape(b, n, 1)
    return d, albedo.reshape(b, n, 3), grad


def surface_normal(points, surf: ImplicitSurface):
    """Unit spatial gradient of d at points (B,N,3); tape-differentiable."""
    d, _, grad = query_field(points, surf, want_tangents=True)
    norm = gc.sqrt((grad * grad).sum(axis=-1) + _EPS_NORM)
    if np.any(norm.data < 1e-6):
        raise FieldError("degenerate (near-zero) field gradient; no normal")
    return grad / norm.reshape(*norm.shape, 1), d


def shade(shader: ShaderNet, normals, illum) -> Tensor:
    """Shading coefficients for unit normals (N,3) and illum codes (N,L)."""
    n = normals if isinstance(normals, Tensor) else Tensor(normals)
    l = illum if isinstance(illum, Tensor) else Tensor(illum)
    return shader(n, l)


# ---------------------------------------------------------------------------
# raw numpy path (mirrors the Tensor path bit for bit inside the box)
# ---------------------------------------------------------------------------

def _encode_np(q: np.ndarray, bands: int) -> np.ndarray:
    parts = [q]
    for a in _fourier_bands(bands, q.dtype):
        parts.append(np.sin(q * a))
        parts.append(np.sin(q * a + np.asarray(HALF_PI, dtype=q.dtype)))
    return np.concatenate(parts, axis=-1)


def field_eval_np(
    surf: ImplicitSurface,
    points: np.ndarray,
    want_albedo: bool = False,
    want_grad: bool = False,
) -> dict:
    """Fast un-taped evaluation at points (N,3) against item 0 of the features."""
    field = surf.field
    feat = surf.features.map.data[0:1]
    dtype = feat.dtype
    p = np.ascontiguousarray(np.asarray(points, dtype=dtype))
    box = np.asarray(surf.box, dtype=dtype)
    q = np.clip(p, -box, box)
    r = p - q
    s = (r * r).sum(axis=-1)
    dist = np.sqrt(s + np.asarray(_EPS_DIST, dtype)) - np.asarray(
        math.sqrt(_EPS_DIST), dtype
    )

    m, off = surf.camera.uv_transform()
    uv = q @ m.astype(dtype) + off.astype(dtype)
    h, w = feat.shape[2], feat.shape[3]
    x0, y0, fx, fy, inx, iny = K.grid_sample_corners((h, w), uv[None])
    g, ddx, ddy = K.grid_sample_gather(feat, x0, y0, fx, fy)
    g = g[0]

    enc = _encode_np(q, field.bands)
    x = np.concatenate([enc, g], axis=-1)
    ws, bs, hdw, hdb, haw, hab = field.np_params()
    zs = []
    hcur = x
    for wgt, bias in zip(ws, bs):
        z = hcur @ wgt + bias
        zs.append(z)
        hcur = K.softplus(z)
    out = {"d": (hcur @ hdw)[:, 0] + hdb[0] + dist}
    if want_albedo:
        out["albedo"] = K.sigmoid(hcur @ haw + hab)
    if want_grad:
        inside = (np.abs(p) < box).astype(dtype)
        eye = np.eye(3, dtype=dtype)[:, None, :]
        tx_parts = [eye * inside[None]]
        for a in _fourier_bands(field.bands, dtype):
            cos_j = np.sin(q * a + np.asarray(HALF_PI, dtype)) * a
            msin_j = np.sin(q * a) * (-a)
            tx_parts.append(eye * (cos_j * inside)[None])
            tx_parts.append(eye * (msin_j * inside)[None])
        su = 0.5 * (w - 1) * inx[0]
        sv = 0.5 * (h - 1) * iny[0]
        tg = []
        for k in range(3):
            tuv = inside[:, k : k + 1] * m[k][None, :].astype(dtype)
            tg.append(ddx[0] * (su * tuv[:, 0])[:, None] + ddy[0] * (sv * tuv[:, 1])[:, None])
        tx = np.concatenate([np.concatenate(tx_parts, axis=-1), np.stack(tg, axis=0)], axis=-1)
        th = tx
        for wgt, z in zip(ws, zs):
            th = (th @ wgt) * K.sigmoid(z)[None]
        dd = (th @ hdw)[:, :, 0]
        denom = np.sqrt(s + np.asarray(_EPS_DIST, dtype))
        out["grad"] = dd.T + r / denom[:, None]
    return out
