"""Synthetic dataset: analytic renders of procedural shapes.

Each example is a directory holding the conditioning image (RGBA, alpha is
the silhouette), the six observation PNGs, and a meta sidecar; manifest.json
ties them together.  Generation is a pure function of (seed list, camera,
resolution), so examples can be regenerated bit-identically from their seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..camera import Camera
from ..render.observation import (
    ObservationSet,
    load_observation,
    pack_observation,
    save_observation,
    _read_png,
    _write_png,
    _to_u8,
)
from .shapes import ShapeOracle, ShapeSpec, gen_shape

FORMAT_VERSION = 1
AMBIENT = 0.3
DIFFUSE = 0.7


class DatasetError(Exception):
    def __init__(self, message: str, example_id: str | None = None):
        super().__init__(message)
        self.example_id = example_id


def trace_oracle(oracle: ShapeOracle, camera: Camera, eps: float = 1e-6, max_steps: int = 192):
    """Sphere trace the analytic SDF for every pixel, front and back.

    Returns dict with z_f, z_b (scene units from the near plane along the
    view), hit masks, and the world-space hit points.
    """
    origins, view = camera.pixel_rays()
    h, w = origins.shape[:2]
    o = origins.reshape(-1, 3)
    span = camera.depth_range

    def march(start: np.ndarray, direction: np.ndarray):
        n = start.shape[0]
        t = np.zeros(n)
        hit = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        for _ in range(max_steps):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            pos = start[idx] + t[idx, None] * direction
            d = oracle.sdf(pos)
            newly = np.abs(d) < eps
            hit_idx = idx[newly]
            hit[hit_idx] = True
            active[hit_idx] = False
            adv = idx[~newly]
            t[adv] += d[~newly] * 0.9
            out = adv[t[adv] > span]
            active[out] = False
        # Newton refine along the ray for hits
        hi = np.flatnonzero(hit)
        if hi.size:
            for _ in range(2):
                pos = start[hi] + t[hi, None] * direction
                d = oracle.sdf(pos)
                slope = oracle.normal(pos) @ direction
                safe = np.abs(slope) > 1e-6
                t[hi[safe]] -= (d[safe] / slope[safe])
        return t, hit

    t_f, hit_f = march(o, view)
    far_start = o + span * view
    t_b, hit_b = march(far_start, -view)
    z_f = t_f.reshape(h, w)
    z_b = (span - t_b).reshape(h, w)
    mask_f = hit_f.reshape(h, w)
    mask_b = hit_b.reshape(h, w)
    # A closed surface yields matching masks; patch stray grazing misses.
    only_f = mask_f & ~mask_b
    z_b[only_f] = z_f[only_f]
    points_f = (o + t_f[:, None] * view).reshape(h, w, 3)
    points_b = (far_start - t_b[:, None] * view).reshape(h, w, 3)
    points_b[only_f] = points_f[only_f]
    return {
        "z_f": z_f,
        "z_b": z_b,
        "mask": mask_f,
        "mask_b": mask_b | only_f,
        "points_f": points_f,
        "points_b": points_b,
    }


@dataclass
class DatasetExample:
    example_id: str
    seed: int
    image: np.ndarray  # (H, W, 4) float32, RGB premasked, alpha = silhouette
    obs: ObservationSet
    camera: Camera
    light: np.ndarray  # unit direction, surface -> light

    def spec(self) -> ShapeSpec:
        return gen_shape(self.seed)


def render_ground_truth(
    spec: ShapeSpec, camera: Camera, light: np.ndarray, example_id: str = "ex", seed: int = 0
) -> DatasetExample:
    light = np.asarray(light, dtype=np.float64)
    if abs(np.linalg.norm(light) - 1.0) > 1e-6:
        raise ValueError("light direction must be unit length")
    oracle = spec.oracle()
    tr = trace_oracle(oracle, camera)
    h, w = tr["mask"].shape
    m = tr["mask"]
    basis = camera.basis()

    def shade_view(points, mask):
        flat = points[mask]
        if flat.size == 0:
            z = np.zeros((h, w, 3))
            return z, z.copy()
        n_world = oracle.normal(flat)
        alb = oracle.albedo(flat)
        n_img = np.zeros((h, w, 3))
        a_img = np.zeros((h, w, 3))
        n_img[mask] = n_world
        a_img[mask] = alb
        return n_img, a_img

    n_f_world, a_f = shade_view(tr["points_f"], m)
    n_b_world, a_b = shade_view(tr["points_b"], m)
    n_f = n_f_world @ basis.T
    n_b = n_b_world @ basis.T
    # trace depths are measured from the near plane; channels use camera z
    obs = pack_observation(
        a_f, a_b, n_f, n_b, camera.near + tr["z_f"], camera.near + tr["z_b"], m, camera
    )

    lambert = AMBIENT + DIFFUSE * np.maximum(0.0, n_f_world @ light)
    rgb = np.clip(a_f * lambert[..., None], 0.0, 1.0)
    rgb[~m] = 0.0
    image = np.concatenate([rgb, m[..., None].astype(np.float64)], axis=-1).astype(np.float32)
    return DatasetExample(
        example_id=example_id, seed=seed, image=image, obs=obs, camera=camera, light=light
    )


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------

_EXAMPLE_FILES = [
    "image.png",
    "albedo_f.png",
    "albedo_b.png",
    "normal_f.png",
    "normal_b.png",
    "depth_f.png",
    "depth_b.png",
]


def _example_digest(ex_dir: str) -> str:
    sha = hashlib.sha256()
    for name in _EXAMPLE_FILES:
        with open(os.path.join(ex_dir, name), "rb") as f:
            sha.update(f.read())
    return sha.hexdigest()


def write_example(ex: DatasetExample, ex_dir: str) -> str:
    os.makedirs(ex_dir, exist_ok=True)
    rgba = np.concatenate(
        [_to_u8(ex.image[..., :3]), _to_u8(ex.image[..., 3:4])], axis=-1
    )
    _write_png(os.path.join(ex_dir, "image.png"), rgba)
    save_observation(ex.obs, os.path.join(ex_dir, ""), ex.camera)
    meta = {
        "id": ex.example_id,
        "seed": ex.seed,
        "camera": ex.camera.to_json(),
        "light": list(map(float, ex.light)),
        "affine": {"channel_range": [-1.0, 1.0], "depth_planes": [ex.camera.near, ex.camera.far]},
    }
    with open(os.path.join(ex_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return _example_digest(ex_dir)


def load_example(ex_dir: str) -> DatasetExample:
    with open(os.path.join(ex_dir, "meta.json")) as f:
        meta = json.load(f)
    camera = Camera.from_json(meta["camera"])
    rgba = _read_png(os.path.join(ex_dir, "image.png")).astype(np.float32) / 255.0
    mask = rgba[..., 3] > 0.5
    obs = load_observation(os.path.join(ex_dir, ""), mask)
    return DatasetExample(
        example_id=meta["id"],
        seed=meta["seed"],
        image=rgba,
        obs=obs,
        camera=camera,
        light=np.asarray(meta["light"]),
    )


def _sample_light(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    v[2] = -abs(v[2])  # front hemisphere: pointing back toward the camera side
    return v / np.linalg.norm(v)


def _gen_one(args):
    out_dir, example_id, seed, camera_json = args
    camera = Camera.from_json(camera_json)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    light = _sample_light(rng)
    ex = render_ground_truth(gen_shape(seed), camera, light, example_id=example_id, seed=seed)
    digest = write_example(ex, os.path.join(out_dir, example_id))
    return example_id, seed, digest


def seeds_for_split(base_seed: int, count: int, ambiguous_only: bool = False) -> list[int]:
    """Deterministic seed list; optionally keep only shapes with recolored backs."""
    seeds = []
    k = 0
    while len(seeds) < count:
        s = int(base_seed + k)
        k += 1
        if ambiguous_only and not gen_shape(s).ambiguous_back:
            continue
        seeds.append(s)
    return seeds


def write_dataset(
    out_dir: str,
    count: int,
    camera: Camera,
    base_seed: int = 0,
    ambiguous_only: bool = False,
    workers: int = 1,
) -> str:
    """Generate `count` examples under out_dir; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    seeds = seeds_for_split(base_seed, count, ambiguous_only)
    jobs = [
        (out_dir, f"ex{idx:05d}", seed, camera.to_json()) for idx, seed in enumerate(seeds)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_one, jobs))
    else:
        results = [_gen_one(j) for j in jobs]
    results.sort(key=lambda r: r[0])  # manifest rows in id order, whatever the workers did
    manifest = {
        "format_version": FORMAT_VERSION,
        "resolution": [camera.height, camera.width],
        "count": count,
        "camera": camera.to_json(),
        "base_seed": base_seed,
        "ambiguous_only": ambiguous_only,
        "examples": [
            {"id": eid, "seed": seed, "sha256": digest} for eid, seed, digest in results
        ],
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, path)
    return path


class DatasetIndex:
    """Lazy reader over a generated dataset directory."""

    def __init__(self, manifest_path: str):
        if not os.path.exists(manifest_path):
            raise DatasetError(f"manifest not found: {manifest_path}")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(
                f"format version {self.manifest.get('format_version')} != {FORMAT_VERSION}"
            )
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.camera = Camera.from_json(self.manifest["camera"])
        entries = self.manifest["examples"]
        if len(entries) != self.manifest["count"]:
            raise DatasetError(
                f"manifest count {self.manifest['count']} != {len(entries)} entries"
            )
        seeds = [e["seed"] for e in entries]
        if len(set(seeds)) != len(seeds):
            raise DatasetError("duplicate seeds in manifest")
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def example_dir(self, i: int) -> str:
        return os.path.join(self.root, self.entries[i]["id"])

    def load(self, i: int) -> DatasetExample:
        return load_example(self.example_dir(i))


def verify_dataset(manifest_path: str, regenerate: bool = True) -> None:
    """Recheck invariants, checksums, and (optionally) seed regeneration.

    Raises DatasetError naming the first failing example."""
    index = DatasetIndex(manifest_path)
    for i, entry in enumerate(index.entries):
        eid = entry["id"]
        ex_dir = index.example_dir(i)
        for name in _EXAMPLE_FILES:
            if not os.path.exists(os.path.join(ex_dir, name)):
                raise DatasetError(f"{eid}: missing {name}", example_id=eid)
        if _example_digest(ex_dir) != entry["sha256"]:
            raise DatasetError(f"{eid}: checksum mismatch", example_id=eid)
        ex = index.load(i)
        try:
            ex.obs.validate(atol=2e-3)  # stored channels carry quantization error
        except Exception as e:
            raise DatasetError(f"{eid}: {e}", example_id=eid) from e
        if not np.array_equal(ex.image[..., 3] > 0.5, ex.obs.mask):
            raise DatasetError(f"{eid}: silhouette != observation mask", example_id=eid)
        if regenerate:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=entry["seed"], spawn_key=(11,))
            )
            light = _sample_light(rng)
            fresh = render_ground_truth(
                gen_shape(entry["seed"]), index.camera, light, example_id=eid, seed=entry["seed"]
            )
            err = np.max(np.abs(fresh.obs.channels - ex.obs.channels))
            if err > 2.0 / 255.0 + 1e-6:
                raise DatasetError(
                    f"{eid}: regenerated channels differ by {err:.5f}", example_id=eid
                )
