"""Orthographic mesh rasterization into observation sets.

Per pixel, the front channels keep the nearest fragment and the back
channels the farthest ("inverting the z-buffer"); at equal depth the lowest
triangle index wins, which makes the result independent of triangle
submission order.  Attributes are interpolated barycentrically.
"""

from __future__ import annotations

import numpy as np

from ..gradcore import Tensor
from ..camera import Camera
from .meshing import Mesh
from .observation import BACKGROUND, ObservationSet, pack_observation


def _collect_fragments(mesh: Mesh, camera: Camera):
    """All (pixel, z, tri, barycentric) fragments, vectorized by window size."""
    v = mesh.vertices
    uv = camera.project_uv(v)
    pix = camera.uv_to_pixel(uv)  # float pixel coords of vertices
    zc = camera.to_camera(v)[:, 2]
    f = mesh.faces
    p0, p1, p2 = pix[f[:, 0]], pix[f[:, 1]], pix[f[:, 2]]
    z0, z1, z2 = zc[f[:, 0]], zc[f[:, 1]], zc[f[:, 2]]

    det = (p1[:, 1] - p2[:, 1]) * (p0[:, 0] - p2[:, 0]) + (
        p2[:, 0] - p1[:, 0]
    ) * (p0[:, 1] - p2[:, 1])
    ok = np.abs(det) > 1e-12  # degenerate triangles are skipped

    xmin = np.ceil(np.maximum(np.minimum.reduce([p0[:, 0], p1[:, 0], p2[:, 0]]), 0.0))
    xmax = np.floor(np.minimum(np.maximum.reduce([p0[:, 0], p1[:, 0], p2[:, 0]]), camera.width - 1.0))
    ymin = np.ceil(np.maximum(np.minimum.reduce([p0[:, 1], p1[:, 1], p2[:, 1]]), 0.0))
    ymax = np.floor(np.minimum(np.maximum.reduce([p0[:, 1], p1[:, 1], p2[:, 1]]), camera.height - 1.0))
    wx = xmax - xmin + 1
    wy = ymax - ymin + 1
    ok &= (wx > 0) & (wy > 0)

    tri_ids = np.flatnonzero(ok)
    if tri_ids.size == 0:
        return None
    win = np.maximum(wx[tri_ids], wy[tri_ids]).astype(np.int64)

    frag_pix, frag_z, frag_tri, frag_bary = [], [], [], []
    size = 1
    remaining = tri_ids
    rem_win = win
    while remaining.size:
        take = rem_win <= size
        tris = remaining[take]
        remaining = remaining[~take]
        rem_win = rem_win[~take]
        if tris.size == 0:
            size *= 2
            continue
        offs = np.arange(size)
        oy, ox = np.meshgrid(offs, offs, indexing="ij")
        ox = ox.reshape(-1)
        oy = oy.reshape(-1)
        x = xmin[tris, None] + ox[None, :]
        y = ymin[tris, None] + oy[None, :]
        valid = (x <= xmax[tris, None]) & (y <= ymax[tris, None])
        a0, a1, a2 = p0[tris], p1[tris], p2[tris]
        dt = det[tris][:, None]
        w0 = ((a1[:, 1, None] - a2[:, 1, None]) * (x - a2[:, 0, None])
              + (a2[:, 0, None] - a1[:, 0, None]) * (y - a2[:, 1, None])) / dt
        w1 = ((a2[:, 1, None] - a0[:, 1, None]) * (x - a0[:, 0, None])
              + (a0[:, 0, None] - a2[:, 0, None]) * (y - a0[:, 1, None])) / dt
        w2 = 1.0 - w0 - w1
        eps = 1e-9
        inside = valid & (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        ti, ci = np.nonzero(inside)
        if ti.size:
            tsel = tris[ti]
            frag_pix.append((y[ti, ci] * camera.width + x[ti, ci]).astype(np.int64))
            frag_z.append(w0[ti, ci] * z0[tsel] + w1[ti, ci] * z1[tsel] + w2[ti, ci] * z2[tsel])
            frag_tri.append(tsel)
            frag_bary.append(np.stack([w0[ti, ci], w1[ti, ci], w2[ti, ci]], axis=1))
        size *= 2
        if size > 4 * max(camera.width, camera.height):
            break
    if not frag_pix:
        return None
    return (
        np.concatenate(frag_pix),
        np.concatenate(frag_z),
        np.concatenate(frag_tri),
        np.concatenate(frag_bary, axis=0),
    )


def _interp(mesh: Mesh, tri: np.ndarray, bary: np.ndarray, attr: np.ndarray) -> np.ndarray:
    f = mesh.faces[tri]
    return (
        bary[:, 0:1] * attr[f[:, 0]]
        + bary[:, 1:2] * attr[f[:, 1]]
        + bary[:, 2:3] * attr[f[:, 2]]
    )


def rasterize(mesh: Mesh, camera: Camera) -> ObservationSet:
    h, w = camera.height, camera.width
    empty = np.zeros((h, w, 3))
    zeros = np.zeros((h, w))
    if mesh.empty or mesh.faces.shape[0] == 0:
        return pack_observation(empty, empty, empty, empty, zeros, zeros,
                                np.zeros((h, w), bool), camera)
    frags = _collect_fragments(mesh, camera)
    if frags is None:
        return pack_observation(empty, empty, empty, empty, zeros, zeros,
                                np.zeros((h, w), bool), camera)
    pix, z, tri, bary = frags

    def winners(order_keys):
        order = np.lexsort(order_keys)
        spix = pix[order]
        first = np.ones(len(spix), dtype=bool)
        first[1:] = spix[1:] != spix[:-1]
        return order[first]

    sel_f = winners((tri, z, pix))  # nearest, ties to lowest index
    sel_b = winners((tri, -z, pix))  # farthest

    basis = camera.basis()

    def view_arrays(sel):
        p = pix[sel]
        alb = np.zeros((h * w, 3))
        nrm = np.zeros((h * w, 3))
        depth = np.zeros(h * w)
        alb[p] = _interp(mesh, tri[sel], bary[sel], mesh.albedo)
        n = _interp(mesh, tri[sel], bary[sel], mesh.normals)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        nrm[p] = n @ basis.T
        depth[p] = z[sel]
        return alb.reshape(h, w, 3), nrm.reshape(h, w, 3), depth.reshape(h, w)

    a_f, n_f, z_f = view_arrays(sel_f)
    a_b, n_b, z_b = view_arrays(sel_b)
    mask = np.zeros(h * w, dtype=bool)
    mask[pix] = True
    mask = mask.reshape(h, w)
    z_f = np.clip(z_f, camera.near, camera.far)
    z_b = np.clip(z_b, camera.near, camera.far)
    return pack_observation(a_f, a_b, n_f, n_b, z_f, z_b, mask, camera)


def shade_front(obs: ObservationSet, illum_code, shader) -> np.ndarray:
    """Shaded image C = A_front * s(N_front, illum) on valid pixels, else 0.

    Returns (H,W,3) in [0,1] (clipped); albedo channels are mapped back from
    [-1,1].  Runs the shader without recording."""
    m = obs.mask
    h, w = m.shape
    out = np.zeros((h, w, 3), dtype=np.float32)
    if not m.any():
        return out
    alb = (obs.group("albedo_front")[m] + 1.0) * 0.5
    n = obs.group("normal_front")[m]
    n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    code = illum_code.data if isinstance(illum_code, Tensor) else np.asarray(illum_code)
    code = np.broadcast_to(code.reshape(1, -1), (n.shape[0], code.size)).astype(np.float32)
    s = shader(Tensor(n.astype(np.float32)), Tensor(code)).data
    out[m] = np.clip(alb * s, 0.0, 1.0)
    return out
