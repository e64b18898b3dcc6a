"""Tracing, meshing, and rasterization against analytic oracles."""

import numpy as np
import pytest

from surfdiff import render as R
from surfdiff import fields as F
from surfdiff.data import shapes as sh
from surfdiff.gradcore import Tape, Tensor
from surfdiff.camera import Camera
from tests.test_fields import tiny_surface


def analytic_sphere_field(dtype=np.float64, cam=None, radius=0.5):
    """Exact sphere SDF through the real query machinery (degenerate box)."""
    surf = tiny_surface(dtype=dtype, cam=cam)
    surf.field.head_d_w.data = np.zeros_like(surf.field.head_d_w.data)
    surf.field.head_d_b.data = np.array([-radius], dtype=dtype)
    surf.field.head_a_w.data = np.zeros_like(surf.field.head_a_w.data)
    surf.box = 1e-9
    return surf


def wide_camera(res=33):
    return Camera(width=res, height=res, half_extent=1.0, near=-2.0, far=2.0)


class TestSphereTrace:
    def test_front_back_depths_on_analytic_sphere(self):
        cam = wide_camera(33)
        oracle = sh.sphere_shape(0.5).oracle()
        uv = cam.pixel_centers_uv()[16:17, 16:17]
        out_f = R.sphere_trace(lambda p: oracle.sdf(p), cam, uv, "front")
        out_b = R.sphere_trace(lambda p: oracle.sdf(p), cam, uv, "back")
        assert out_f["hit"][0] and out_b["hit"][0]
        assert abs(out_f["t"][0] - 1.5) < 2e-3
        # back marches from the far plane: 4.0 span - 1.5 remaining
        assert abs((cam.depth_range - out_b["t"][0]) - 2.5) < 2e-3

    def test_converges_within_30_steps_at_1e3(self):
        cam = wide_camera(33)
        for seed in range(3):
            oracle = sh.gen_shape(seed).oracle()
            out = R.sphere_trace(lambda p: oracle.sdf(p), cam, None, "front",
                                 max_steps=30, eps_hit=1e-3)
            assert out["hit"].any()
            assert np.all(out["steps"][out["hit"]] <= 30)
            d_at_hits = oracle.sdf(out["points"][out["hit"]])
            assert np.max(np.abs(d_at_hits)) < 1e-3

    def test_miss_reports_far(self):
        cam = wide_camera(33)
        oracle = sh.sphere_shape(0.2).oracle()
        uv = cam.pixel_centers_uv()[0:1, 0:1]  # corner ray misses
        out = R.sphere_trace(lambda p: oracle.sdf(p), cam, uv, "front")
        assert not out["hit"][0]
        assert out["t"][0] == cam.depth_range

    def test_network_field_path(self):
        cam = wide_camera(17)
        surf = analytic_sphere_field(cam=cam)
        uv = cam.pixel_centers_uv()[8:9, 8:9]
        out = R.sphere_trace(lambda p: F.field_eval_np(surf, p)["d"], cam, uv, "front")
        assert out["hit"][0]
        assert abs(out["t"][0] - 1.5) < 2e-3

    def test_bad_args(self):
        cam = wide_camera(17)
        with pytest.raises(R.RenderError):
            R.sphere_trace(lambda p: p[:, 0], cam, None, "sideways")
        with pytest.raises(R.RenderError):
            R.sphere_trace(lambda p: p[:, 0], cam, None, "front", max_steps=0)


class TestMarchingCubes:
    def test_sphere_area_volume_and_vertex_sdf(self):
        oracle = sh.sphere_shape(0.5).oracle()
        mesh = R.marching_cubes(lambda p: oracle.sdf(p), 128)
        mesh.validate()
        area = mesh.area()
        vol = mesh.volume()
        assert abs(area - 4 * np.pi * 0.25) / (4 * np.pi * 0.25) < 0.02
        assert abs(vol - 4 / 3 * np.pi * 0.125) / (4 / 3 * np.pi * 0.125) < 0.02
        cell_diag = np.sqrt(3) * (2.0 / 128)
        assert np.max(np.abs(oracle.sdf(mesh.vertices))) < cell_diag

    def test_empty_field_gives_empty_mesh(self):
        mesh = R.marching_cubes(lambda p: np.full(len(p), 0.3), 32)
        assert mesh.empty

    def test_res_check(self):
        with pytest.raises(ValueError):
            R.marching_cubes(lambda p: p[:, 0], 4)

    def test_coarse_to_fine_matches_dense(self):
        oracle = sh.gen_shape(11).oracle()
        coarse, _ = R.evaluate_grid(lambda p: oracle.sdf(p), 48, coarse_factor=4)
        dense, _ = R.evaluate_grid(lambda p: oracle.sdf(p), 48, coarse_factor=1)
        # signs agree everywhere; values agree where refined
        assert np.array_equal(np.sign(coarse) >= 0, np.sign(dense) >= 0)
        near = np.abs(dense) < 0.05
        assert np.array_equal(coarse[near], dense[near])

    def test_field_mesh_carries_albedo_normals(self):
        surf = analytic_sphere_field(cam=wide_camera(17))
        mesh = R.marching_cubes(surf, 64)
        mesh.validate()
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", radial, mesh.normals)
        assert np.min(cos) > 0.999
        assert np.allclose(mesh.albedo, 0.5, atol=1e-6)


class TestRasterize:
    def quad_mesh(self, z=0.0, size=0.5, albedo=(0.3, 0.6, 0.9)):
        verts = np.array(
            [[-size, -size, z], [size, -size, z], [size, size, z], [-size, size, z]]
        )
        faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
        normals = np.tile([0.0, 0.0, -1.0], (4, 1))
        alb = np.tile(albedo, (4, 1))
        return R.Mesh(vertices=verts, faces=faces, normals=normals, albedo=alb)

    def test_camera_facing_quad_depth_and_normals(self):
        cam = Camera(width=33, height=33, half_extent=1.0, near=-1.0, far=1.0)
        obs = R.rasterize(self.quad_mesh(z=0.0), cam)
        m = obs.mask
        assert m.sum() > 0
        assert np.max(np.abs(obs.channels[..., R.observation.DEPTH_F][m])) < 1e-9
        nf = obs.group("normal_front")[m]
        assert np.max(np.abs(nf - np.array([0, 0, -1.0]))) < 1e-9

    def test_sphere_front_back_depth_difference(self):
        cam = wide_camera(33)
        oracle = sh.sphere_shape(0.5).oracle()
        mesh = R.marching_cubes(lambda p: oracle.sdf(p), 96)
        mesh.albedo[:] = 0.5
        obs = R.rasterize(mesh, cam)
        c = obs.channels
        df = c[16, 16, R.observation.DEPTH_F]
        db = c[16, 16, R.observation.DEPTH_B]
        want = 2 * 0.5 / (cam.depth_range / 2)
        assert abs((db - df) - want) < 0.05
        assert np.all(c[..., R.observation.DEPTH_B][obs.mask]
                      >= c[..., R.observation.DEPTH_F][obs.mask] - 1e-6)

    def test_triangle_order_independence(self):
        cam = wide_camera(17)
        oracle = sh.gen_shape(2).oracle()
        mesh = R.marching_cubes(lambda p: oracle.sdf(p), 48)
        mesh.albedo[:] = np.random.default_rng(0).uniform(0, 1, size=mesh.albedo.shape)
        obs1 = R.rasterize(mesh, cam)
        perm = np.random.default_rng(1).permutation(len(mesh.faces))
        mesh2 = R.Mesh(mesh.vertices, mesh.faces[perm], mesh.normals, mesh.albedo)
        obs2 = R.rasterize(mesh2, cam)
        assert np.array_equal(obs1.mask, obs2.mask)
        assert np.max(np.abs(obs1.channels - obs2.channels)) < 1e-5

    def test_empty_mesh(self):
        obs = R.rasterize(R.empty_mesh(), wide_camera(17))
        assert not obs.mask.any()
        assert np.all(obs.channels == -1.0)


class TestRenderDenoised:
    def test_patch_matches_full_on_analytic_sphere(self):
        cam = wide_camera(33)
        surf = analytic_sphere_field(cam=cam)
        obs, mesh = R.render_denoised(surf, "full", grid_res=128)
        patch = R.render_denoised(surf, "patch", patch_origin=(8, 8), patch_size=16,
                                  eps_hit=1e-5, max_steps=60)
        sub = obs.channels[8:24, 8:24]
        both = patch.mask & obs.mask[8:24, 8:24]
        assert both.sum() > 20
        diff = np.abs(patch.channels[both] - sub[both])
        assert np.max(diff) < 0.02

    def test_empty_field_patch_is_background(self):
        cam = wide_camera(17)
        surf = tiny_surface(cam=cam)  # d == 0.5 everywhere at init
        surf.field.head_d_w.data = np.zeros_like(surf.field.head_d_w.data)
        surf.field.head_d_b.data = np.array([0.5])
        patch = R.render_denoised(surf, "patch", patch_origin=(4, 4), patch_size=8)
        assert not patch.mask.any()
        assert np.all(patch.channels == R.BACKGROUND)

    def test_patch_out_of_bounds_rejected(self):
        surf = analytic_sphere_field(cam=wide_camera(17))
        with pytest.raises(R.RenderError):
            R.render_denoised(surf, "patch", patch_origin=(14, 14), patch_size=8)

    def test_traced_vs_rasterized_depth_agreement(self):
        cam = wide_camera(33)
        surf = analytic_sphere_field(cam=cam)
        res = 96
        obs, _ = R.render_denoised(surf, "full", grid_res=res)
        patch = R.render_denoised(surf, "patch", patch_origin=(0, 0), patch_size=33)
        both = patch.mask & obs.mask
        df_t = patch.channels[..., R.observation.DEPTH_F][both]
        df_r = obs.channels[..., R.observation.DEPTH_F][both]
        cell = 2.0 / res / (cam.depth_range / 2)  # one grid cell in channel units
        agree = np.abs(df_t - df_r) <= 2 * cell
        assert agree.mean() >= 0.95

    def test_patch_gradient_matches_fd(self):
        # tiny field network: loss = MSE(patch, target) w.r.t. parameters
        rng = np.random.default_rng(3)
        cam = Camera(width=12, height=12, half_extent=1.0, near=-1.5, far=1.5)
        surf = tiny_surface(seed=5, dtype=np.float64, feat_dim=4, width=8, hidden=2,
                            bands=1, res=7, cam=cam)
        surf.field.head_d_w.data = rng.normal(0, 0.1, size=(8, 1))
        surf.field.head_d_b.data = np.array([-0.35])
        target = rng.uniform(-1, 1, size=(8, 8, 14))
        params = list(surf.field.parameters())

        def loss_np():
            p = R.render_patch(surf, (2, 2), 8, max_steps=64, eps_hit=1e-9)
            return float(np.mean((p.channels - target) ** 2))

        for _, t in params:
            t.grad = None
        with Tape() as tape:
            p = R.render_patch(surf, (2, 2), 8, max_steps=64, eps_hit=1e-9)
            vals, idx = p.channel_tensors()
            assert vals is not None and len(idx) > 4
            tgt = target.reshape(-1, 14)[idx]
            err = vals - Tensor(tgt)
            loss = (err * err).sum() * (1.0 / target.size)
        tape.backward(loss)
        # constant background terms shift the loss but not the gradient
        h = 1e-6
        checked = 0
        for name, t in params:
            if t.grad is None:
                continue
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_np()
                flat[i] = orig - h
                fm = loss_np()
                flat[i] = orig
                want = (fp - fm) / (2 * h)
                if abs(want) < 1e-12 and abs(gflat[i]) < 1e-12:
                    continue
                assert abs(gflat[i] - want) < 5e-3 * max(abs(want), 1e-3), name
                checked += 1
        assert checked > 10


class TestPly:
    def test_roundtrip_and_determinism(self, tmp_path):
        oracle = sh.sphere_shape(0.4, color=(0.9, 0.2, 0.1)).oracle()
        mesh = R.marching_cubes(lambda p: oracle.sdf(p), 32)
        mesh.albedo[:] = [0.9, 0.2, 0.1]
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        R.save_ply(mesh, str(p1))
        R.save_ply(mesh, str(p2))
        assert p1.read_bytes() == p2.read_bytes()
        back = R.load_ply(str(p1))
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
        assert np.array_equal(back.faces, mesh.faces)
        assert np.allclose(back.albedo, mesh.albedo, atol=1 / 255)


class TestShadeFront:
    def test_identity_and_uniform_shading(self):
        cam = wide_camera(17)
        oracle = sh.sphere_shape(0.5, color=(0.2, 0.5, 0.8)).oracle()
        mesh = R.marching_cubes(lambda p: oracle.sdf(p), 48)
        mesh.albedo[:] = [0.2, 0.5, 0.8]
        obs = R.rasterize(mesh, cam)

        class ConstShader:
            def __init__(self, val):
                self.val = val

            def __call__(self, n, l):
                return Tensor(np.full((n.shape[0], 3), self.val, dtype=np.float32))

        c1 = R.shade_front(obs, np.zeros(4, dtype=np.float32), ConstShader(1.0))
        alb = (obs.group("albedo_front") + 1.0) * 0.5
        assert np.max(np.abs(c1[obs.mask] - alb[obs.mask])) < 1e-6
        c2 = R.shade_front(obs, np.zeros(4, dtype=np.float32), ConstShader(0.5))
        assert np.max(np.abs(c2[obs.mask] - 0.5 * alb[obs.mask])) < 1e-6
