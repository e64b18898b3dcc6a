"""Quantitative evaluation: 3D metrics, image metrics, and aggregation.

Chamfer distance aligns the prediction to the ground truth with rigid ICP
first, then averages the two directed mean-squared nearest-neighbour
distances (reported x1000).  IoU compares sign-based occupancy grids.
Image metrics operate inside the silhouette only; both inputs are reset to
the background constant outside the mask, which makes every metric invariant
to background content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve
from scipy.spatial import cKDTree

from .data.shapes import BOX_LIMIT, ShapeOracle
from .fields import ImplicitSurface, field_eval_np
from .render.meshing import Mesh, marching_cubes
from .render.observation import CHANNEL_GROUPS, ObservationSet

INF_SENTINEL = float("inf")
PSNR_CAP = 99.0

HIGHER_BETTER = {"iou", "nc", "psnr", "ssim"}
LOWER_BETTER = {"chamfer", "angular"}


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# 3D metrics
# ---------------------------------------------------------------------------

def icp_align(src: np.ndarray, dst: np.ndarray, iters: int = 20,
              tol: float = 1e-6) -> np.ndarray:
    """Rigid point-to-point ICP; returns src aligned onto dst.

    Identity initialization after a centroid pre-shift."""
    aligned = src + (dst.mean(axis=0) - src.mean(axis=0))
    tree = cKDTree(dst)
    prev = np.inf
    for _ in range(iters):
        _, nn = tree.query(aligned)
        target = dst[nn]
        mu_s = aligned.mean(axis=0)
        mu_t = target.mean(axis=0)
        h = (aligned - mu_s).T @ (target - mu_t)
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
        aligned = (aligned - mu_s) @ rot.T + mu_t
        err = float(np.mean(np.sum((aligned - target) ** 2, axis=1)))
        if abs(prev - err) < tol * max(prev, 1e-12):
            break
        prev = err
    return aligned


def chamfer_points(a: np.ndarray, b: np.ndarray, use_icp: bool = True) -> float:
    """Mean of both directed mean-squared nearest distances, x1000."""
    if len(a) == 0 or len(b) == 0:
        return INF_SENTINEL
    if use_icp:
        a = icp_align(a, b)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 1000.0 * 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))


def chamfer(pred: Mesh, gt_points: np.ndarray, samples: int = 10000,
            seed: int = 0, use_icp: bool = True) -> float:
    if pred.empty:
        return INF_SENTINEL
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
    pts = pred.sample_surface(rng, samples)
    return chamfer_points(pts, gt_points, use_icp=use_icp)


def oracle_surface_points(oracle: ShapeOracle, samples: int = 10000, seed: int = 0,
                          grid_res: int = 96) -> np.ndarray:
    """Uniform ground-truth surface samples via a dense mesh of the oracle."""
    mesh = marching_cubes(lambda p: oracle.sdf(p), grid_res)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(6,)))
    return mesh.sample_surface(rng, samples)


def _occupancy_from_mesh(mesh: Mesh, res: int, box: float = 1.0) -> np.ndarray:
    """Sign by z-column crossing parity (watertight meshes)."""
    centers = (np.arange(res) + 0.5) / res * 2 * box - box
    occ = np.zeros((res, res, res), dtype=bool)
    if mesh.empty or mesh.faces.shape[0] == 0:
        return occ
    v = mesh.vertices
    f = mesh.faces
    tri = v[f]  # (F,3,3)
    xmin = tri[..., 0].min(axis=1)
    xmax = tri[..., 0].max(axis=1)
    ymin = tri[..., 1].min(axis=1)
    ymax = tri[..., 1].max(axis=1)
    for ix, x in enumerate(centers):
        sel = (xmin <= x) & (xmax >= x)
        if not sel.any():
            continue
        t_x = tri[sel]
        for iy, y in enumerate(centers):
            sel_y = (ymin[sel] <= y) & (ymax[sel] >= y)
            if not sel_y.any():
                continue
            zs = _column_crossings(t_x[sel_y], x, y)
            if len(zs) < 2:
                continue
            zs = np.sort(zs)
            inside = np.zeros(res, dtype=bool)
            for z0, z1 in zip(zs[0::2], zs[1::2]):
                inside |= (centers >= z0) & (centers <= z1)
            occ[ix, iy] = inside
    return occ


def _column_crossings(tris: np.ndarray, x: float, y: float) -> np.ndarray:
    """z values where the vertical line (x, y, *) pierces the triangles."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    d0 = (b[:, :2] - a[:, :2])
    d1 = (c[:, :2] - a[:, :2])
    det = d0[:, 0] * d1[:, 1] - d0[:, 1] * d1[:, 0]
    ok = np.abs(det) > 1e-15
    p = np.array([x, y])
    rel = p - a[:, :2]
    w0 = (rel[:, 0] * d1[:, 1] - rel[:, 1] * d1[:, 0]) / np.where(ok, det, 1.0)
    w1 = (d0[:, 0] * rel[:, 1] - d0[:, 1] * rel[:, 0]) / np.where(ok, det, 1.0)
    inside = ok & (w0 >= 0) & (w1 >= 0) & (w0 + w1 <= 1)
    z = a[:, 2] + w0 * (b[:, 2] - a[:, 2]) + w1 * (c[:, 2] - a[:, 2])
    return z[inside]


def voxel_iou(pred, gt_oracle: ShapeOracle, res: int = 128, box: float = 1.0) -> float:
    """|pred inside AND gt inside| / |either inside| on a res^3 grid."""
    if res < 32:
        raise EvalError(f"IoU grid must be >= 32, got {res}")
    centers = (np.arange(res) + 0.5) / res * 2 * box - box
    gx, gy, gz = np.meshgrid(centers, centers, centers, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    gt_occ = (gt_oracle.sdf(pts) < 0).reshape(res, res, res)
    if isinstance(pred, ImplicitSurface):
        d = np.empty(len(pts))
        chunk = 65536
        for s in range(0, len(pts), chunk):
            d[s : s + chunk] = field_eval_np(pred, pts[s : s + chunk])["d"]
        pred_occ = (d < 0).reshape(res, res, res)
    elif isinstance(pred, Mesh):
        pred_occ = _occupancy_from_mesh(pred, res, box)
    elif isinstance(pred, ShapeOracle):
        pred_occ = (pred.sdf(pts) < 0).reshape(res, res, res)
    else:
        raise EvalError(f"unsupported prediction type {type(pred)}")
    union = np.logical_or(pred_occ, gt_occ).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred_occ, gt_occ).sum() / union)


def normal_consistency(pred: Mesh, gt_oracle: ShapeOracle, samples: int = 5000,
                       seed: int = 0) -> float:
    """Symmetrized mean cosine between predicted and oracle normals."""
    if pred.empty:
        return -INF_SENTINEL
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    # prediction -> gt: oracle normal at the nearest gt surface point
    pv = pred.sample_surface(rng, samples)
    proj = gt_oracle.project_to_surface(pv)
    n_gt_at = gt_oracle.normal(proj)
    # interpolate predicted normals at sampled points via nearest vertex
    vtree = cKDTree(pred.vertices)
    _, vidx = vtree.query(pv)
    n_pred = pred.normals[vidx]
    fwd = np.mean(np.sum(n_pred * n_gt_at, axis=1))
    # gt -> prediction: predicted normal at nearest pred vertex
    gt_pts = oracle_surface_points(gt_oracle, samples, seed + 1)
    _, vidx2 = vtree.query(gt_pts)
    n_pred2 = pred.normals[vidx2]
    n_gt2 = gt_oracle.normal(gt_pts)
    bwd = np.mean(np.sum(n_pred2 * n_gt2, axis=1))
    return float(0.5 * (fwd + bwd))


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

def _gaussian_kernel2d(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
         value_range: float = 2.0) -> float:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EvalError("empty mask")
    mse = float(np.mean((pred[m] - gt[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(value_range**2 / mse))


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
         value_range: float = 2.0) -> float:
    """SSIM with a 7x7 Gaussian window and the standard stabilizers,
    averaged over masked pixels; background is neutralized first."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EvalError("empty mask")
    kern = _gaussian_kernel2d(7, 1.5)
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    vals = []
    for ch in range(pred.shape[-1]):
        x = np.where(m, pred[..., ch], -1.0)
        y = np.where(m, gt[..., ch], -1.0)
        mu_x = convolve(x, kern, mode="nearest")
        mu_y = convolve(y, kern, mode="nearest")
        xx = convolve(x * x, kern, mode="nearest") - mu_x**2
        yy = convolve(y * y, kern, mode="nearest") - mu_y**2
        xy = convolve(x * y, kern, mode="nearest") - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        )
        vals.append(float(s[m].mean()))
    return float(np.mean(vals))


def angular_error_deg(pred_normals: np.ndarray, gt_normals: np.ndarray,
                      mask: np.ndarray) -> float:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EvalError("empty mask")
    a = pred_normals[m]
    b = gt_normals[m]
    a = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    dots = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def image_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                  normals: bool = False, value_range: float = 2.0) -> dict:
    if pred.shape != gt.shape:
        raise EvalError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = {
        "psnr": psnr(pred, gt, mask, value_range),
        "ssim": ssim(pred, gt, mask, value_range),
    }
    if normals:
        out["angular"] = angular_error_deg(pred, gt, mask)
    return out


def observation_metrics(pred: ObservationSet, gt: ObservationSet) -> dict:
    """Per-channel-group image metrics between two observation sets."""
    m = gt.mask
    out = {}
    for group in ("albedo_front", "albedo_back"):
        r = image_metrics(pred.group(group), gt.group(group), m)
        out[f"{group}_psnr"] = r["psnr"]
        out[f"{group}_ssim"] = r["ssim"]
    for group in ("normal_front", "normal_back"):
        out[f"{group}_angular"] = angular_error_deg(pred.group(group), gt.group(group), m)
    return out


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Raw per-example, per-sample values plus best-of-N and mean/std rows."""

    metrics: list  # metric names
    raw: dict  # example_id -> {metric: [per-sample values]}
    best_of: dict = field(default_factory=dict)  # N -> {metric: aggregate}
    mean: dict = field(default_factory=dict)  # metric -> (mean, std)

    def to_json(self) -> dict:
        return {
            "metrics": self.metrics,
            "raw": self.raw,
            "best_of": {str(k): v for k, v in self.best_of.items()},
            "mean": self.mean,
        }


def _is_lower_better(name: str) -> bool:
    for key in LOWER_BETTER:
        if key in name:
            return True
    return False


def best_of_n(values: list, n: int, lower_better: bool) -> float:
    """Best over the first n samples of the list."""
    if n > len(values):
        raise EvalError(f"best-of-{n} needs {n} samples, have {len(values)}")
    head = values[:n]
    return min(head) if lower_better else max(head)


def aggregate(raw: dict, n_list=(1, 5, 10)) -> MetricsReport:
    """raw: example_id -> {metric: [per-sample values]}.

    best_of[N][metric] averages each example's best-of-N (per metric,
    independently); mean[metric] pools the per-example sample means and the
    per-example population stds."""
    if not raw:
        raise EvalError("no examples to aggregate")
    metrics = sorted(next(iter(raw.values())).keys())
    rep = MetricsReport(metrics=metrics, raw=raw)
    for n in n_list:
        agg = {}
        for met in metrics:
            lb = _is_lower_better(met)
            vals = [best_of_n(ex[met], n, lb) for ex in raw.values()]
            agg[met] = float(np.mean(vals))
        rep.best_of[n] = agg
    for met in metrics:
        means = [float(np.mean(ex[met])) for ex in raw.values()]
        stds = [float(np.std(ex[met])) for ex in raw.values()]
        rep.mean[met] = (float(np.mean(means)), float(np.mean(stds)))
    return rep


def diversity_map(observations: list) -> dict:
    """Unbiased per-pixel variance over N observation sets, per channel group."""
    if len(observations) < 2:
        raise EvalError("diversity needs at least 2 samples")
    stack = np.stack([o.channels for o in observations], axis=0)
    var = stack.var(axis=0, ddof=1)
    return {name: var[..., sl].mean(axis=-1) for name, sl in CHANNEL_GROUPS.items()}
