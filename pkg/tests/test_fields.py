"""Implicit-surface queries: projection alignment, gradients, path equality."""

import numpy as np
import pytest

import surfdiff.gradcore as gc
from surfdiff.gradcore import Tape, Tensor
from surfdiff import fields as F
from surfdiff.nets import FeatureNet, FieldMLP, ShaderNet, time_embedding
from surfdiff.camera import Camera


def tiny_surface(seed=0, dtype=np.float64, feat_dim=6, width=16, hidden=2, bands=2,
                 res=9, cam=None, batch=1):
    rng = np.random.default_rng(seed)
    field = FieldMLP(rng, feat_dim=feat_dim, width=width, hidden_layers=hidden,
                     bands=bands, dtype=dtype)
    # give the heads real weights so gradients flow everywhere
    field.head_d_w.data = rng.normal(0, 0.3, size=field.head_d_w.shape).astype(dtype)
    field.head_a_w.data = rng.normal(0, 0.3, size=field.head_a_w.shape).astype(dtype)
    fmap = Tensor(rng.normal(0, 0.5, size=(batch, feat_dim, res, res)).astype(dtype))
    illum = Tensor(rng.normal(0, 0.5, size=(batch, 4)).astype(dtype))
    camera = cam or Camera(width=res, height=res, near=-2.0, far=2.0)
    return F.ImplicitSurface(field=field, features=F.PixelFeatures(fmap, illum), camera=camera)


class TestQueryField:
    def test_constant_field_with_zeroed_head(self):
        surf = tiny_surface()
        surf.field.head_d_w.data = np.zeros_like(surf.field.head_d_w.data)
        surf.field.head_d_b.data = np.array([0.37])
        p = np.random.default_rng(1).uniform(-0.9, 0.9, size=(1, 50, 3))
        d, a = F.query_field(p, surf)
        assert np.max(np.abs(d.data - 0.37)) < 1e-12
        assert np.all((a.data >= 0) & (a.data <= 1))

    def test_pixel_alignment_same_projection_same_feature(self):
        surf = tiny_surface()
        # two points differing only along the view axis (z) project identically
        base = np.array([[0.21, -0.4, -0.8], [0.21, -0.4, 0.55]])
        uv = surf.camera.project_uv(base)
        assert np.allclose(uv[0], uv[1])
        m, off = surf.camera.uv_transform()
        g1 = gc.grid_sample(surf.features.map, Tensor((base[:1] @ m + off)[None])).data
        g2 = gc.grid_sample(surf.features.map, Tensor((base[1:] @ m + off)[None])).data
        assert np.array_equal(g1, g2)

    def test_outside_box_distance_lower_bound(self):
        surf = tiny_surface()
        p_out = np.array([[[1.8, 0.0, 0.0], [0.0, -2.0, 1.5]]])
        p_edge = np.clip(p_out, -1, 1)
        d_out, _ = F.query_field(p_out, surf)
        d_edge, _ = F.query_field(p_edge, surf)
        gap = np.linalg.norm(p_out - p_edge, axis=-1)
        assert np.allclose(d_out.data, d_edge.data + gap, atol=1e-6)

    def test_numpy_path_matches_tensor_path(self):
        surf = tiny_surface(dtype=np.float32)
        rng = np.random.default_rng(2)
        p = rng.uniform(-1.4, 1.4, size=(1, 128, 3)).astype(np.float32)
        d_t, a_t, g_t = F.query_field(p, surf, want_tangents=True)
        out = F.field_eval_np(surf, p[0], want_albedo=True, want_grad=True)
        assert np.array_equal(out["d"], d_t.data[0])
        assert np.array_equal(out["albedo"], a_t.data[0])
        assert np.array_equal(out["grad"], g_t.data[0])

    def test_non_finite_rejected(self):
        surf = tiny_surface()
        with pytest.raises(F.FieldError):
            F.query_field(np.array([[[np.nan, 0, 0]]]), surf)


class TestSpatialGradient:
    def test_gradient_matches_fd_inside_box(self):
        surf = tiny_surface(dtype=np.float64)
        rng = np.random.default_rng(3)
        # stay clear of bilinear cell boundaries by sampling cell interiors
        p = rng.uniform(-0.85, 0.85, size=(1, 40, 3))
        _, _, grad = F.query_field(p, surf, want_tangents=True)
        h = 1e-5
        fd = np.empty((40, 3))
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            dp_ = F.field_eval_np(surf, p[0] + dp)["d"]
            dm_ = F.field_eval_np(surf, p[0] - dp)["d"]
            fd[:, k] = (dp_ - dm_) / (2 * h)
        rel = np.abs(grad.data[0] - fd) / np.maximum(np.abs(fd), 1.0)
        assert np.max(rel) < 1e-4

    def test_gradient_param_backward_matches_fd(self):
        # second-order path: d/dparams of a loss built from the spatial gradient
        surf = tiny_surface(dtype=np.float64)
        p = np.random.default_rng(4).uniform(-0.8, 0.8, size=(1, 12, 3))
        params = list(surf.field.parameters())

        def loss_value():
            out = F.field_eval_np(surf, p[0], want_grad=True)
            return float(np.sum((np.linalg.norm(out["grad"], axis=-1) - 1.0) ** 2))

        for name, t in params[:4]:
            t.grad = None
        with Tape() as tape:
            _, _, grad = F.query_field(p, surf, want_tangents=True)
            norm = gc.sqrt((grad * grad).sum(axis=-1) + 1e-12)
            loss = ((norm - 1.0) * (norm - 1.0)).sum()
        tape.backward(loss)
        h = 1e-6
        for name, t in params:
            if t.grad is None:
                continue
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            idxs = np.random.default_rng(5).choice(flat.size, size=min(4, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_value()
                flat[i] = orig - h
                fm = loss_value()
                flat[i] = orig
                want = (fp - fm) / (2 * h)
                assert abs(gflat[i] - want) < 1e-4 * max(abs(want), 1.0), name

    def test_surface_normal_unit_length(self):
        surf = tiny_surface(dtype=np.float64)
        p = np.random.default_rng(6).uniform(-0.8, 0.8, size=(1, 30, 3))
        n, _ = F.surface_normal(p, surf)
        assert np.max(np.abs(np.linalg.norm(n.data, axis=-1) - 1.0)) < 1e-6


class TestSphereOverfit:
    @pytest.fixture(scope="class")
    def fitted(self):
        # regress the field onto the analytic sphere SDF (radius 0.5)
        surf = tiny_surface(seed=8, dtype=np.float32, width=48, hidden=3, bands=4)
        rng = np.random.default_rng(9)
        params = list(surf.field.parameters())
        opt = gc.Adam(params, lr=3e-3)
        for step in range(600):
            p = rng.uniform(-1, 1, size=(1, 256, 3)).astype(np.float32)
            want = np.linalg.norm(p[0], axis=-1) - 0.5
            for _, t in params:
                t.grad = None
            with Tape() as tape:
                d, _ = F.query_field(p, surf)
                err = d.reshape(256) - Tensor(want.astype(np.float32))
                loss = (err * err).mean()
            tape.backward(loss)
            opt.step()
        return surf

    def test_signs(self, fitted):
        d, _ = F.query_field(np.array([[[0.0, 0.0, 0.0], [0.0, 0.0, 0.9]]], dtype=np.float32), fitted)
        assert d.data[0, 0] < 0
        assert d.data[0, 1] > 0

    def test_normal_roughly_radial(self, fitted):
        n, _ = F.surface_normal(np.array([[[0.5, 0.0, 0.0]]], dtype=np.float32), fitted)
        assert np.linalg.norm(n.data[0, 0] - np.array([1, 0, 0])) < 0.5


class TestAnalyticSphereField:
    """A shrunken bounding box turns the analytic continuation into an exact
    sphere SDF d(p) = ||p|| - 0.5, exercising the full query path."""

    def _sphere_field(self):
        surf = tiny_surface(dtype=np.float64)
        surf.field.head_d_w.data = np.zeros_like(surf.field.head_d_w.data)
        surf.field.head_d_b.data = np.array([-0.5])
        surf.box = 1e-9
        return surf

    def test_values(self):
        surf = self._sphere_field()
        p = np.random.default_rng(20).uniform(-1, 1, size=(1, 64, 3))
        d, _ = F.query_field(p, surf)
        want = np.linalg.norm(p[0], axis=-1) - 0.5
        # the smooth continuation carries a constant sqrt(eps)=1e-6 offset
        assert np.max(np.abs(d.data[0] - want)) < 3e-6

    def test_normal_exact_radial(self):
        surf = self._sphere_field()
        n, _ = F.surface_normal(np.array([[[0.5, 0.0, 0.0]]]), surf)
        assert np.linalg.norm(n.data[0, 0] - np.array([1.0, 0.0, 0.0])) < 1e-3

    def test_normals_match_fd(self):
        surf = self._sphere_field()
        rng = np.random.default_rng(21)
        p = rng.uniform(0.2, 0.9, size=(1, 20, 3))
        _, _, grad = F.query_field(p, surf, want_tangents=True)
        h = 1e-6
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            fd = (F.field_eval_np(surf, p[0] + dp)["d"] - F.field_eval_np(surf, p[0] - dp)["d"]) / (2 * h)
            rel = np.abs(grad.data[0, :, k] - fd) / np.maximum(np.abs(fd), 1.0)
            assert np.max(rel) < 1e-3


class TestShader:
    def test_identity_at_init(self):
        rng = np.random.default_rng(10)
        shader = ShaderNet(rng, illum_dim=4)
        n = rng.normal(size=(5, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        s = F.shade(shader, n.astype(np.float32), rng.normal(size=(5, 4)).astype(np.float32))
        assert np.max(np.abs(s.data - 1.0)) < 1e-5

    def test_orientation_sensitivity(self):
        rng = np.random.default_rng(11)
        shader = ShaderNet(rng, illum_dim=4)
        # give the head real weights
        shader.head_w.data = rng.normal(0, 0.5, size=shader.head_w.shape).astype(np.float32)
        n = np.array([[0.0, 0.0, -1.0]], dtype=np.float32)
        l = rng.normal(size=(1, 4)).astype(np.float32)
        s1 = F.shade(shader, n, l).data
        s2 = F.shade(shader, -n, l).data
        assert not np.allclose(s1, s2)

    def test_nonnegative(self):
        rng = np.random.default_rng(12)
        shader = ShaderNet(rng, illum_dim=4)
        shader.head_w.data = rng.normal(0, 1.0, size=shader.head_w.shape).astype(np.float32)
        n = rng.normal(size=(64, 3)).astype(np.float32)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        s = F.shade(shader, n, rng.normal(size=(64, 4)).astype(np.float32))
        assert np.all(s.data >= 0)


class TestExtractFeatures:
    @pytest.fixture(scope="class")
    def fnet(self):
        return FeatureNet(np.random.default_rng(13), base=4, feat_dim=8, illum_dim=4)

    def _inputs(self, b=1, res=16, seed=14):
        rng = np.random.default_rng(seed)
        xt = rng.uniform(-1, 1, size=(b, res, res, 14)).astype(np.float32)
        img = rng.uniform(0, 1, size=(b, res, res, 3)).astype(np.float32)
        mask = np.ones((b, res, res), dtype=bool)
        return xt, img, mask

    def test_deterministic(self, fnet):
        xt, img, mask = self._inputs()
        a = F.extract_features(fnet, xt, img, 17, mask)
        b = F.extract_features(fnet, xt, img, 17, mask)
        assert np.array_equal(a.map.data, b.map.data)
        assert np.array_equal(a.illum.data, b.illum.data)

    def test_time_dependence(self, fnet):
        xt, img, mask = self._inputs()
        a = F.extract_features(fnet, xt, img, 17, mask)
        b = F.extract_features(fnet, xt, img, 900, mask)
        assert not np.allclose(a.map.data, b.map.data)

    def test_output_shape_64(self):
        fnet = FeatureNet(np.random.default_rng(15), base=4, feat_dim=32, illum_dim=16)
        xt = np.zeros((1, 64, 64, 14), dtype=np.float32)
        img = np.zeros((1, 64, 64, 3), dtype=np.float32)
        feats = F.extract_features(fnet, xt, img, 1, np.ones((1, 64, 64), bool))
        assert feats.map.shape == (1, 32, 64, 64)
        assert feats.illum.shape == (1, 16)

    def test_spatial_mismatch_rejected(self, fnet):
        xt, img, mask = self._inputs()
        with pytest.raises(F.FieldError):
            F.extract_features(fnet, xt, img[:, :8], 1, mask)

    def test_condition_dropping_uses_null(self, fnet):
        xt, img, mask = self._inputs()
        dropped = F.extract_features(fnet, xt, img, 5, mask, drop=np.array([1.0]))
        none_img = F.extract_features(fnet, xt, None, 5, mask)
        kept = F.extract_features(fnet, xt, img, 5, mask, drop=np.array([0.0]))
        assert np.allclose(dropped.map.data, none_img.map.data)
        assert not np.allclose(dropped.map.data, kept.map.data)

    def test_time_embedding_shape(self):
        e = time_embedding(np.array([1, 500, 1000]))
        assert e.shape == (3, 32)
        assert not np.allclose(e[0], e[1])
