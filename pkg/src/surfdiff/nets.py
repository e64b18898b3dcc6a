"""Network definitions: feature extractor / generator U-Nets, field MLP, shader.

The U-Nets have 4 levels with base width 16 doubling per level and skip
connections; each level is modulated by a sinusoidal timestep embedding via
scale-and-shift.  The field MLP consumes Fourier-encoded 3D points plus
bilinearly sampled pixel-aligned features; its spatial gradient (needed for
normals and the Eikonal penalty) is computed by propagating coordinate
tangents forward through the same primitives, which keeps the result
first-order differentiable wrt all parameters.
"""

from __future__ import annotations

import math

import numpy as np

from . import gradcore as gc
from .gradcore import Module, Tensor


TIME_EMBED_DIM = 32


def time_embedding(t: np.ndarray, dim: int = TIME_EMBED_DIM, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def relu(x, slope: float = 0.1):
    return gc.leaky_relu(x, slope)


def clip_t(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp built from rectifiers; exact inside [lo, hi]."""
    zero = lambda t: gc.leaky_relu(t, 0.0)
    return x - zero(x - hi) + zero(gc.mul(x, -1.0) + lo)


class Film(Module):
    """Timestep modulation: temb -> per-channel (scale, shift)."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        self.w = gc.param(rng.normal(0, 0.02, size=(TIME_EMBED_DIM, 2 * channels)), dtype)
        self.b = gc.zeros(2 * channels, dtype=dtype)
        self.channels = channels

    def __call__(self, h: Tensor, temb: Tensor) -> Tensor:
        sb = temb @ self.w + self.b  # (B, 2C)
        c = self.channels
        scale = sb[:, :c].reshape(sb.shape[0], c, 1, 1)
        shift = sb[:, c:].reshape(sb.shape[0], c, 1, 1)
        return h * (scale + 1.0) + shift


class ConvBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, dtype=np.float32):
        self.w1 = gc.kaiming_conv(rng, c_out, c_in, 3, 3, dtype)
        self.b1 = gc.zeros(c_out, dtype=dtype)
        self.w2 = gc.kaiming_conv(rng, c_out, c_out, 3, 3, dtype)
        self.b2 = gc.zeros(c_out, dtype=dtype)
        self.film = Film(rng, c_out, dtype)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = relu(self.film(gc.conv2d(x, self.w1, self.b1, pad=1), temb))
        return relu(gc.conv2d(h, self.w2, self.b2, pad=1))


class UNet(Module):
    """Encoder-decoder with skips; returns the head output and the bottleneck."""

    def __init__(self, rng, c_in: int, c_out: int, base: int = 16, levels: int = 4,
                 dtype=np.float32):
        widths = [base * (2**i) for i in range(levels)]
        self.levels = levels
        self.widths = widths
        self.stem_w = gc.kaiming_conv(rng, widths[0], c_in, 3, 3, dtype)
        self.stem_b = gc.zeros(widths[0], dtype=dtype)
        self.enc = [ConvBlock(rng, widths[i], widths[i], dtype) for i in range(levels)]
        self.down_w = [
            gc.kaiming_conv(rng, widths[i + 1], widths[i], 3, 3, dtype)
            for i in range(levels - 1)
        ]
        self.down_b = [gc.zeros(widths[i + 1], dtype=dtype) for i in range(levels - 1)]
        self.up_w = [
            gc.kaiming_conv(rng, widths[i], widths[i + 1], 3, 3, dtype)
            for i in range(levels - 1)
        ]
        self.up_b = [gc.zeros(widths[i], dtype=dtype) for i in range(levels - 1)]
        self.dec = [ConvBlock(rng, 2 * widths[i], widths[i], dtype) for i in range(levels - 1)]
        self.head_w = gc.kaiming_conv(rng, c_out, widths[0], 3, 3, dtype)
        self.head_b = gc.zeros(c_out, dtype=dtype)

    def __call__(self, x: Tensor, temb: Tensor):
        h = gc.conv2d(x, self.stem_w, self.stem_b, pad=1)
        skips = []
        for i in range(self.levels - 1):
            h = self.enc[i](h, temb)
            skips.append(h)
            h = relu(gc.conv2d(h, self.down_w[i], self.down_b[i], stride=2, pad=1))
        h = self.enc[-1](h, temb)
        bottleneck = h
        for i in reversed(range(self.levels - 1)):
            h = gc.upsample2x(h, "nearest")
            h = relu(gc.conv2d(h, self.up_w[i], self.up_b[i], pad=1))
            h = gc.concat([h, skips[i]], axis=1)
            h = self.dec[i](h, temb)
        out = gc.conv2d(h, self.head_w, self.head_b, pad=1)
        return out, bottleneck


class FeatureNet(Module):
    """g: (x_t, I, t) -> pixel-aligned feature map + illumination code.

    The conditioning image can be dropped per batch item, in which case a
    learned constant takes its place.
    """

    def __init__(self, rng, obs_channels: int = 14, img_channels: int = 3,
                 feat_dim: int = 32, illum_dim: int = 16, base: int = 16,
                 dtype=np.float32):
        self.unet = UNet(rng, obs_channels + img_channels, feat_dim, base=base, dtype=dtype)
        bott = self.unet.widths[-1]
        self.illum_w = gc.param(rng.normal(0, 0.05, size=(bott, illum_dim)), dtype)
        self.illum_b = gc.zeros(illum_dim, dtype=dtype)
        self.null_cond = gc.param(np.zeros(img_channels), dtype)
        self.feat_dim = feat_dim
        self.illum_dim = illum_dim

    def __call__(self, xt: Tensor, img: Tensor | None, temb: Tensor,
                 drop: np.ndarray | None = None):
        """xt (B,14,H,W); img (B,3,H,W) in [-1,1] or None for all-dropped.

        drop is a (B,) 0/1 array selecting items whose image is replaced by
        the learned null constant."""
        b, _, h, w = xt.shape
        null_img = self.null_cond.reshape(1, -1, 1, 1) * Tensor(
            np.ones((b, 1, h, w), dtype=xt.dtype)
        )
        if img is None:
            img_in = null_img
        elif drop is not None and drop.any():
            keep = Tensor((1.0 - drop).reshape(b, 1, 1, 1).astype(xt.dtype))
            dropm = Tensor(drop.reshape(b, 1, 1, 1).astype(xt.dtype))
            img_in = img * keep + null_img * dropm
        else:
            img_in = img
        feat, bottleneck = self.unet(gc.concat([xt, img_in], axis=1), temb)
        pooled = bottleneck.mean(axis=(2, 3))
        illum = pooled @ self.illum_w + self.illum_b
        return feat, illum


class GeneratorNet(Module):
    """h: pixel-aligned features -> denoised observation estimate in [-1,1]."""

    def __init__(self, rng, feat_dim: int = 32, obs_channels: int = 14, base: int = 16,
                 dtype=np.float32):
        self.unet = UNet(rng, feat_dim, obs_channels, base=base, dtype=dtype)

    def __call__(self, features: Tensor, temb: Tensor) -> Tensor:
        out, _ = self.unet(features, temb)
        return gc.tanh(out)


def fourier_dim(bands: int) -> int:
    return 3 + 6 * bands


class FieldMLP(Module):
    """f: (encoded point, sampled feature) -> (signed distance, albedo).

    Zero-initialized heads give d == d_bias everywhere at init, so the early
    field is a valid empty SDF; albedo starts mid-gray.
    """

    def __init__(self, rng, feat_dim: int = 32, width: int = 128, hidden_layers: int = 5,
                 bands: int = 6, d_bias: float = 0.5, dtype=np.float32):
        self.bands = bands
        self.feat_dim = feat_dim
        in_dim = fourier_dim(bands) + feat_dim
        dims = [in_dim] + [width] * hidden_layers
        self.ws = [gc.kaiming_linear(rng, dims[i], dims[i + 1], dtype) for i in range(hidden_layers)]
        self.bs = [gc.zeros(dims[i + 1], dtype=dtype) for i in range(hidden_layers)]
        self.head_d_w = gc.zeros(width, 1, dtype=dtype)
        self.head_d_b = gc.param(np.array([d_bias]), dtype)
        self.head_a_w = gc.zeros(width, 3, dtype=dtype)
        self.head_a_b = gc.zeros(3, dtype=dtype)

    # ---- tape path ------------------------------------------------------
    def forward(self, x: Tensor):
        h = x
        zs = []
        for w, b in zip(self.ws, self.bs):
            z = h @ w + b
            zs.append(z)
            h = gc.softplus(z)
        d = (h @ self.head_d_w + self.head_d_b)[:, 0]
        a = gc.sigmoid(h @ self.head_a_w + self.head_a_b)
        return d, a, zs

    def forward_with_tangent(self, x: Tensor, tx: Tensor):
        """Forward plus one pass of K tangent directions.

        x (N, D); tx (K, N, D).  Returns d (N,), a (N,3), and the directional
        derivatives dd (K, N), all on the tape."""
        h, th = x, tx
        for w, b in zip(self.ws, self.bs):
            z = h @ w + b
            tz = th @ w
            s = gc.sigmoid(z)
            h = gc.softplus(z)
            th = tz * s  # d softplus = sigmoid
        d = (h @ self.head_d_w + self.head_d_b)[:, 0]
        a = gc.sigmoid(h @ self.head_a_w + self.head_a_b)
        dd = (th @ self.head_d_w)[:, :, 0]
        return d, a, dd

    # ---- raw numpy path (must mirror forward() bit for bit) --------------
    def np_params(self):
        return (
            [w.data for w in self.ws],
            [b.data for b in self.bs],
            self.head_d_w.data,
            self.head_d_b.data,
            self.head_a_w.data,
            self.head_a_b.data,
        )


class ShaderNet(Module):
    """s: (surface normal, illumination code) -> per-channel shading >= 0.

    Zero-initialized head with softplus^-1(1) bias, so shading starts at 1
    (identity) everywhere."""

    def __init__(self, rng, illum_dim: int = 16, width: int = 64, dtype=np.float32):
        self.w1 = gc.kaiming_linear(rng, 3 + illum_dim, width, dtype)
        self.b1 = gc.zeros(width, dtype=dtype)
        self.w2 = gc.kaiming_linear(rng, width, width, dtype)
        self.b2 = gc.zeros(width, dtype=dtype)
        self.head_w = gc.zeros(width, 3, dtype=dtype)
        self.head_b = gc.param(np.full(3, math.log(math.e - 1.0)), dtype)

    def __call__(self, normals: Tensor, illum: Tensor) -> Tensor:
        """normals (N,3) unit; illum (N,L). Returns shading (N,3)."""
        x = gc.concat([normals, illum], axis=1)
        h = gc.softplus(x @ self.w1 + self.b1)
        h = gc.softplus(h @ self.w2 + self.b2)
        return gc.softplus(h @ self.head_w + self.head_b)
