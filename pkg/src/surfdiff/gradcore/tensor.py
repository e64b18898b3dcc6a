"""Dense-array reverse-mode automatic differentiation.

A :class:`Tape` is an explicit computation record: ops append themselves in
creation order, which is topological by construction, and ``backward`` replays
the list in reverse, visiting each node exactly once.  Tensors are immutable
values after construction; recording only happens inside a ``with Tape():``
block and only for ops whose inputs require gradients.

Float32 is the training dtype; build float64 tensors for finite-difference
verification.  All reductions delegate to numpy's pairwise summation, so a
given op sequence is bit-reproducible across runs and worker counts.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K


class GradcoreError(Exception):
    """Contract violation inside the autodiff core."""


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive ops, replayed in reverse by backward()."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise GradcoreError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: "Tensor") -> None:
        """Accumulate d(root)/d(leaf) into .grad of every reachable tensor."""
        if self._consumed:
            raise GradcoreError("backward() already ran on this tape; build a new one")
        if root.data.ndim != 0 and root.data.size != 1:
            raise GradcoreError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for node in reversed(self._nodes):
            out = node.out
            if out.grad is None:
                continue
            grads = node.bwd(out.grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.data.shape:
                    g = _unbroadcast(g, t.data.shape)
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad = t.grad + g


class _Node:
    __slots__ = ("name", "out", "inputs", "bwd")

    def __init__(self, name, out, inputs, bwd):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tensor:
    """Immutable dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _record(name, out, inputs, bwd):
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE._nodes.append(_Node(name, out, inputs, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (adjoint of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, getattr(a, "dtype", None))
    out = Tensor(a.data / b.data)
    return _record(
        "div", out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data))
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise GradcoreError("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise GradcoreError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if b.ndim == 1:
            ga = np.outer(g, b.data) if a.ndim > 1 else g * b.data
            gb = a.data.T @ g if a.ndim > 1 else g * a.data
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(K.softplus(x.data))
    return _record("softplus", out, (x,), lambda g: (g * K.sigmoid(x.data),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = K.sigmoid(x.data)
    out = Tensor(s)
    return _record("sigmoid", out, (x,), lambda g: (g * s * (1.0 - s),))


def sin(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sin(x.data))
    return _record("sin", out, (x,), lambda g: (g * np.cos(x.data),))


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.where(x.data >= 0, x.data, slope * x.data))
    mask = np.where(x.data >= 0, np.asarray(1.0, x.dtype), np.asarray(slope, x.dtype))
    return _record("leaky_relu", out, (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    """Composite: 2*sigmoid(2x) - 1."""
    return sigmoid(mul(x, 2.0)) * 2.0 - 1.0


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    r = np.sqrt(x.data)
    out = Tensor(r)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / r,))


def abs_(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)
    return _record("abs", out, (x,), lambda g: (g * sign,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    out = Tensor(e)
    return _record("exp", out, (x,), lambda g: (g * e,))


# ---------------------------------------------------------------------------
# reductions, shaping, indexing
# ---------------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _record("sum", out, (x,), bwd)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for a in axes:
            n *= x.shape[a]
    return sum_(x, axis, keepdims) * (1.0 / n)


def reshape(x, *shape) -> Tensor:
    x = _as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(x.data.reshape(shape))
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, *axes) -> Tensor:
    x = _as_tensor(x)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    out = Tensor(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("getitem", out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise GradcoreError(f"conv2d expects 4-D input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise GradcoreError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride not in (1, 2):
        raise GradcoreError("conv2d supports stride 1 or 2")
    bt = _as_tensor(b) if b is not None else None
    y, cols = K.conv2d_forward(x.data, w.data, bt.data if bt is not None else None, stride, pad)
    out = Tensor(y)
    inputs = (x, w) if bt is None else (x, w, bt)

    def bwd(g):
        gx, gw, gb = K.conv2d_backward(g, x.shape, w.data, cols, stride, pad, bt is not None)
        return (gx, gw) if bt is None else (gx, gw, gb)

    return _record("conv2d", out, inputs, bwd)


def conv2d_transpose(x, w, b=None, stride: int = 2, pad: int = 0) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[1] != w.shape[0]:
        raise GradcoreError(
            f"conv2d_transpose channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    bt = _as_tensor(b) if b is not None else None
    y = K.conv2d_transpose_forward(
        x.data, w.data, bt.data if bt is not None else None, stride, pad
    )
    out = Tensor(y)
    inputs = (x, w) if bt is None else (x, w, bt)

    def bwd(g):
        gx, gw, gb = K.conv2d_transpose_backward(g, x.data, w.data, stride, pad, bt is not None)
        return (gx, gw) if bt is None else (gx, gw, gb)

    return _record("conv2d_transpose", out, inputs, bwd)


def upsample2x(x, mode: str = "nearest") -> Tensor:
    x = _as_tensor(x)
    if mode == "nearest":
        out = Tensor(K.upsample2x_nearest(x.data))
        return _record("upsample2x", out, (x,), lambda g: (K.upsample2x_nearest_backward(g),))
    if mode == "bilinear":
        out = Tensor(K.upsample2x_bilinear(x.data))
        return _record(
            "upsample2x", out, (x,), lambda g: (K.upsample2x_bilinear_backward(g, x.shape),)
        )
    raise GradcoreError(f"unknown upsample mode {mode!r}")


def grid_sample(feat, coords) -> Tensor:
    """Bilinear sample feat (B,C,H,W) at coords (B,N,2) in [-1,1] -> (B,N,C).

    Out-of-range coordinates clamp to the border; their spatial gradient is
    zero there.  Differentiable wrt both the feature map and the coordinates.
    """
    feat, coords = _as_tensor(feat), _as_tensor(coords)
    b, c, h, w = feat.shape
    x0, y0, fx, fy, inx, iny = K.grid_sample_corners((h, w), coords.data)
    val, ddx, ddy = K.grid_sample_gather(feat.data, x0, y0, fx, fy)
    out = Tensor(val)
    su = 0.5 * (w - 1) * inx  # d px / d u, zero where clamped
    sv = 0.5 * (h - 1) * iny

    def bwd(g):
        gfeat = K.grid_sample_scatter(g, feat.shape, x0, y0, fx, fy)
        gu = (g * ddx).sum(axis=-1) * su
        gv = (g * ddy).sum(axis=-1) * sv
        return gfeat, np.stack([gu, gv], axis=-1).astype(coords.dtype, copy=False)

    return _record("grid_sample", out, (feat, coords), bwd)


def grid_sample_jvp(feat, coords: np.ndarray, tangents) -> Tensor:
    """Directional derivative of grid_sample wrt pixel coordinates.

    Returns d value / d t where coords move along `tangents` (B,N,2, in the
    [-1,1] coordinate frame).  `coords` is a plain array: within a bilinear
    cell the spatial derivative is constant in the coordinates, so no
    gradient flows to them.  Differentiable wrt feat and tangents.
    """
    feat = _as_tensor(feat)
    tangents = _as_tensor(tangents)
    b, c, h, w = feat.shape
    x0, y0, fx, fy, inx, iny = K.grid_sample_corners((h, w), np.asarray(coords))
    _, ddx, ddy = K.grid_sample_gather(feat.data, x0, y0, fx, fy)
    su = (0.5 * (w - 1) * inx)[..., None]
    sv = (0.5 * (h - 1) * iny)[..., None]
    tu = tangents.data[..., 0:1]
    tv = tangents.data[..., 1:2]
    out = Tensor(ddx * su * tu + ddy * sv * tv)

    def bwd(g):
        gtu = (g * ddx * su).sum(axis=-1)
        gtv = (g * ddy * sv).sum(axis=-1)
        # d out / d feat: corner-difference weights scaled by tangents
        gx_eff = g * su * tu  # weight on ddx
        gy_eff = g * sv * tv  # weight on ddy
        fx_ = fx[..., None]
        fy_ = fy[..., None]
        bidx = np.broadcast_to(np.arange(b)[:, None], x0.shape)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        gfeat = np.zeros(feat.shape, dtype=g.dtype)
        np.add.at(gfeat, (bidx, slice(None), y0, x0), -gx_eff * (1 - fy_) - gy_eff * (1 - fx_))
        np.add.at(gfeat, (bidx, slice(None), y0, x1), gx_eff * (1 - fy_) - gy_eff * fx_)
        np.add.at(gfeat, (bidx, slice(None), y1, x0), -gx_eff * fy_ + gy_eff * (1 - fx_))
        np.add.at(gfeat, (bidx, slice(None), y1, x1), gx_eff * fy_ + gy_eff * fx_)
        return gfeat, np.stack([gtu, gtv], axis=-1).astype(tangents.dtype, copy=False)

    return _record("grid_sample_jvp", out, (feat, tangents), bwd)
