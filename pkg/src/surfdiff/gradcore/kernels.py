"""Raw numpy kernels shared by the autodiff ops and the no-grad fast paths.

Everything here is a pure function of ndarrays.  Convolutions use an
im2col view plus one BLAS matmul; the scatter counterparts (col2im,
grid-sample accumulation) use `np.add.at`, which is unbuffered and
therefore deterministic for repeated indices.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B, Ho*Wo, C*kh*kw) patch matrix (copies)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, _, _ = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(col)


def col2im(
    cols: np.ndarray,
    x_shape: tuple,
    kh: int,
    kw: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to (B,C,H,W)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            wj = j + stride * wo
            out[:, :, i:hi:stride, j:wj:stride] += patches[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d_forward(x, w, b, stride: int, pad: int):
    """x (B,C,H,W), w (O,C,kh,kw), b (O,) or None -> (y, cols)."""
    bsz = x.shape[0]
    o, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(o, -1).T
    if b is not None:
        y += b
    ho = conv_out_size(x.shape[2], kh, stride, pad)
    wo = conv_out_size(x.shape[3], kw, stride, pad)
    return y.transpose(0, 2, 1).reshape(bsz, o, ho, wo), cols


def conv2d_backward(gy, x_shape, w, cols, stride: int, pad: int, with_bias: bool):
    """Gradients of conv2d_forward wrt (x, w, b)."""
    bsz, o, ho, wo = gy.shape
    g = gy.reshape(bsz, o, ho * wo).transpose(0, 2, 1)  # (B, P, O)
    gw = np.einsum("bpo,bpk->ok", g, cols, optimize=True).reshape(w.shape)
    gcols = g @ w.reshape(o, -1)
    gx = col2im(gcols, x_shape, w.shape[2], w.shape[3], stride, pad)
    gb = gy.sum(axis=(0, 2, 3)) if with_bias else None
    return gx, gw, gb


def conv2d_transpose_forward(x, w, b, stride: int, pad: int):
    """Transposed conv: x (B,Ci,H,W), w (Ci,Co,kh,kw) -> (B,Co,Hout,Wout).

    Hout = (H-1)*stride - 2*pad + kh.  Implemented as the data-gradient of
    the matching forward convolution.
    """
    bsz, ci, h, wdt = x.shape
    _, co, kh, kw = w.shape
    hout = (h - 1) * stride - 2 * pad + kh
    wout = (wdt - 1) * stride - 2 * pad + kw
    g = x.reshape(bsz, ci, h * wdt).transpose(0, 2, 1)  # (B, P, Ci)
    gcols = g @ w.reshape(ci, -1)  # (B, P, Co*kh*kw)
    y = col2im(gcols, (bsz, co, hout, wout), kh, kw, stride, pad)
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv2d_transpose_backward(gy, x, w, stride: int, pad: int, with_bias: bool):
    bsz, ci, h, wdt = x.shape
    _, co, kh, kw = w.shape
    cols = im2col(gy, kh, kw, stride, pad)  # (B, H*W, Co*kh*kw)
    gx = (cols @ w.reshape(ci, -1).T).transpose(0, 2, 1).reshape(x.shape)
    g = x.reshape(bsz, ci, h * wdt).transpose(0, 2, 1)
    gw = np.einsum("bpc,bpk->ck", g, cols, optimize=True).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3)) if with_bias else None
    return gx, gw, gb


def upsample2x_nearest(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_nearest_backward(gy):
    b, c, h, w = gy.shape
    return gy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _bilinear2x_weights(n: int, dtype):
    """Source indices/weights for factor-2 bilinear upsampling (half-pixel centers)."""
    pos = (np.arange(2 * n, dtype=dtype) + 0.5) / 2.0 - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n - 2) if n > 1 else i0
    frac = pos - i0
    return i0, frac


def upsample2x_bilinear(x):
    b, c, h, w = x.shape
    y0, fy = _bilinear2x_weights(h, x.dtype)
    x0, fx = _bilinear2x_weights(w, x.dtype)
    rows = x[:, :, y0, :] * (1 - fy)[None, None, :, None]
    rows += x[:, :, np.minimum(y0 + 1, h - 1), :] * fy[None, None, :, None]
    out = rows[:, :, :, x0] * (1 - fx)[None, None, None, :]
    out += rows[:, :, :, np.minimum(x0 + 1, w - 1)] * fx[None, None, None, :]
    return out


def upsample2x_bilinear_backward(gy, in_shape):
    b, c, h, w = in_shape
    y0, fy = _bilinear2x_weights(h, gy.dtype)
    x0, fx = _bilinear2x_weights(w, gy.dtype)
    grows = np.zeros((b, c, h, 2 * w), dtype=gy.dtype)
    np.add.at(grows, (slice(None), slice(None), y0), gy * (1 - fy)[None, None, :, None])
    np.add.at(
        grows,
        (slice(None), slice(None), np.minimum(y0 + 1, h - 1)),
        gy * fy[None, None, :, None],
    )
    gx = np.zeros((b, c, h, w), dtype=gy.dtype)
    gt = grows.transpose(0, 1, 3, 2)  # scatter along last-but-one axis
    tmp = np.zeros((b, c, w, h), dtype=gy.dtype)
    np.add.at(tmp, (slice(None), slice(None), x0), gt * (1 - fx)[None, None, :, None])
    np.add.at(
        tmp,
        (slice(None), slice(None), np.minimum(x0 + 1, w - 1)),
        gt * fx[None, None, :, None],
    )
    gx += tmp.transpose(0, 1, 3, 2)
    return gx


def grid_sample_corners(shape_hw: tuple, coords: np.ndarray):
    """Bilinear corner indices/weights for coords (B,N,2) in [-1,1].

    Uses align_corners=True mapping with border clamping: u=-1 is the center
    of column 0, u=+1 the center of column W-1.  Returns pixel-space
    positions as well so callers can form spatial derivatives.
    """
    h, w = shape_hw
    u = coords[..., 0]
    v = coords[..., 1]
    # non-finite coords (diverged upstream values) clamp to the border so the
    # gather stays in bounds; the NaN still reaches the caller via the weights
    px = np.clip(np.nan_to_num((u + 1.0) * 0.5 * (w - 1)), 0.0, w - 1.0)
    py = np.clip(np.nan_to_num((v + 1.0) * 0.5 * (h - 1)), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.int64), max(h - 2, 0))
    fx = px - x0
    fy = py - y0
    inx = (u >= -1.0) & (u <= 1.0)
    iny = (v >= -1.0) & (v <= 1.0)
    return x0, y0, fx, fy, inx, iny


def grid_sample_gather(feat: np.ndarray, x0, y0, fx, fy):
    """feat (B,C,H,W) -> value (B,N,C) plus per-axis corner differences."""
    b, c, h, w = feat.shape
    bidx = np.arange(b)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    f00 = feat[bidx, :, y0, x0]
    f01 = feat[bidx, :, y0, x1]
    f10 = feat[bidx, :, y1, x0]
    f11 = feat[bidx, :, y1, x1]
    fx_ = fx[..., None]
    fy_ = fy[..., None]
    top = f00 * (1 - fx_) + f01 * fx_
    bot = f10 * (1 - fx_) + f11 * fx_
    val = top * (1 - fy_) + bot * fy_
    ddx = (f01 - f00) * (1 - fy_) + (f11 - f10) * fy_  # d val / d px
    ddy = bot - top  # d val / d py
    return val, ddx, ddy


def grid_sample_scatter(grad_out, feat_shape, x0, y0, fx, fy):
    """Adjoint of the gather above: grad_out (B,N,C) -> grad feat (B,C,H,W)."""
    b, c, h, w = feat_shape
    bidx = np.broadcast_to(np.arange(b)[:, None], x0.shape)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx_ = fx[..., None]
    fy_ = fy[..., None]
    gfeat = np.zeros(feat_shape, dtype=grad_out.dtype)
    np.add.at(gfeat, (bidx, slice(None), y0, x0), grad_out * (1 - fx_) * (1 - fy_))
    np.add.at(gfeat, (bidx, slice(None), y0, x1), grad_out * fx_ * (1 - fy_))
    np.add.at(gfeat, (bidx, slice(None), y1, x0), grad_out * (1 - fx_) * fy_)
    np.add.at(gfeat, (bidx, slice(None), y1, x1), grad_out * fx_ * fy_)
    return gfeat


def softplus(x):
    # log(1+e^x) evaluated stably on both tails
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
