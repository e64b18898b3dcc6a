"""Procedural SDF shapes: blended primitives with per-primitive albedo.

Formulas follow the usual distance-function catalogue (sphere, capsule,
rounded box, polynomial smooth union).  The smooth union of true SDFs is a
lower bound of the distance to the blended surface, so sphere tracing with
unit steps remains safe; tracing code still applies a small safety factor
because the blend can locally raise the Lipschitz constant slightly.

All point arguments are (N, 3) float arrays; SDF results are (N,).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOX_LIMIT = 0.9  # every generated shape fits inside [-0.9, 0.9]^3


def sd_sphere(p: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(p - center, axis=-1) - radius


def sd_capsule(p: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    pa = p - a
    ba = b - a
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - radius


def sd_rounded_box(
    p: np.ndarray, center: np.ndarray, rot: np.ndarray, half: np.ndarray, radius: float
) -> np.ndarray:
    q = np.abs((p - center) @ rot.T) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside - radius


def smooth_union(d1: np.ndarray, d2: np.ndarray, k: float) -> np.ndarray:
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    return d2 * (1.0 - h) + d1 * h - k * h * (1.0 - h)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class Primitive:
    kind: str  # sphere | capsule | box
    params: dict
    color: np.ndarray  # base albedo, (3,) in [0,1]
    back_color: np.ndarray | None = None  # replaces color where z > 0

    def sdf(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return sd_sphere(p, self.params["center"], self.params["radius"])
        if self.kind == "capsule":
            return sd_capsule(p, self.params["a"], self.params["b"], self.params["radius"])
        if self.kind == "box":
            return sd_rounded_box(
                p,
                self.params["center"],
                self.params["rot"],
                self.params["half"],
                self.params["radius"],
            )
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass
class ShapeSpec:
    seed: int
    primitives: list
    blend: float
    ambiguous_back: bool = False

    def oracle(self) -> "ShapeOracle":
        return ShapeOracle(self)


class ShapeOracle:
    """Exact SDF, albedo, normal, and surface projection for a ShapeSpec."""

    def __init__(self, spec: ShapeSpec):
        self.spec = spec

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        d = self.spec.primitives[0].sdf(p)
        for prim in self.spec.primitives[1:]:
            d = smooth_union(d, prim.sdf(p), self.spec.blend)
        return d

    def member_sdfs(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        return np.stack([prim.sdf(p) for prim in self.spec.primitives], axis=0)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        """Color of the nearest primitive, with the back-half recolor applied."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        nearest = np.argmin(self.member_sdfs(p), axis=0)
        front = np.stack([prim.color for prim in self.spec.primitives], axis=0)
        back = np.stack(
            [
                prim.back_color if prim.back_color is not None else prim.color
                for prim in self.spec.primitives
            ],
            axis=0,
        )
        colors = np.where((p[:, 2] > 0.0)[:, None], back[nearest], front[nearest])
        return colors

    def normal(self, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Central-difference gradient of the SDF, normalized."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        g = np.empty_like(p)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            g[:, k] = (self.sdf(p + dp) - self.sdf(p - dp)) / (2 * h)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(n, 1e-12)

    def project_to_surface(self, p: np.ndarray, iters: int = 24) -> np.ndarray:
        """Walk each point along -d * normal until it sits on the zero set."""
        q = np.atleast_2d(np.asarray(p, dtype=np.float64)).copy()
        for _ in range(iters):
            d = self.sdf(q)
            if np.max(np.abs(d)) < 1e-9:
                break
            q -= d[:, None] * self.normal(q)
        return q

    def surface_points(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Approximately uniform surface samples via rejection + projection."""
        points = []
        need = n
        while need > 0:
            cand = rng.uniform(-BOX_LIMIT, BOX_LIMIT, size=(max(4 * need, 256), 3))
            d = self.sdf(cand)
            near = cand[np.abs(d) < 0.25]
            if near.shape[0] == 0:
                near = cand[np.argsort(np.abs(d))[: max(need, 16)]]
            proj = self.project_to_surface(near)
            ok = proj[np.abs(self.sdf(proj)) < 1e-6]
            take = ok[:need]
            points.append(take)
            need -= take.shape[0]
        return np.concatenate(points, axis=0)[:n]


def gen_shape(seed: int) -> ShapeSpec:
    """Deterministic 2-5 primitive blend; half the shapes get an independently
    recolored back half, which makes the unseen side genuinely ambiguous."""
    rng = np.random.default_rng(seed)
    n_prims = int(rng.integers(2, 6))
    blend = float(rng.uniform(0.05, 0.15))
    ambiguous = bool(rng.uniform() < 0.5)
    prims = []
    for _ in range(n_prims):
        kind = ["sphere", "capsule", "box"][int(rng.integers(0, 3))]
        color = rng.uniform(0.10, 0.95, size=3)
        back_color = rng.uniform(0.10, 0.95, size=3) if ambiguous else None
        if kind == "sphere":
            radius = float(rng.uniform(0.18, 0.40))
            center = rng.uniform(-1.0, 1.0, size=3) * (BOX_LIMIT - radius - 0.05)
            params = {"center": center, "radius": radius}
        elif kind == "capsule":
            radius = float(rng.uniform(0.10, 0.22))
            lim = BOX_LIMIT - radius - 0.05
            a = rng.uniform(-lim, lim, size=3) * 0.8
            b = a + rng.normal(size=3) * 0.35
            b = np.clip(b, -lim, lim)
            params = {"a": a, "b": b, "radius": radius}
        else:
            radius = float(rng.uniform(0.03, 0.08))
            half = rng.uniform(0.12, 0.30, size=3)
            reach = float(np.linalg.norm(half)) + radius
            center = rng.uniform(-1.0, 1.0, size=3) * max(BOX_LIMIT - reach - 0.05, 0.0)
            params = {"center": center, "rot": _random_rotation(rng), "half": half, "radius": radius}
        prims.append(Primitive(kind=kind, params=params, color=color, back_color=back_color))
    return ShapeSpec(seed=seed, primitives=prims, blend=blend, ambiguous_back=ambiguous)


def sphere_shape(radius: float = 0.5, color=(0.8, 0.8, 0.8)) -> ShapeSpec:
    """Single analytic sphere at the origin; the workhorse test oracle."""
    prim = Primitive(
        kind="sphere",
        params={"center": np.zeros(3), "radius": radius},
        color=np.asarray(color, dtype=np.float64),
    )
    return ShapeSpec(seed=-1, primitives=[prim], blend=0.1)
