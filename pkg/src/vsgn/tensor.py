"""Dense tensors with reverse-mode differentiation.

Values are numpy arrays of rank 0..4. Every differentiable operation
records its input tensors and a backward closure; ``backward(loss)``
replays the recorded compute graph in reverse creation order, which is
a valid reverse topological order because inputs are always created
before their outputs. Each recorded operation is visited exactly once.

Network code keeps feature maps in (batch, time, channel) layout.
Training may run in float32; gradient checking uses float64 inputs and
the ops preserve the dtype they are given.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np


class ConfigurationError(ValueError):
    """Raised when tensor/layer shapes or settings are inconsistent."""


_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / data preparation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None
        self._order = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; constants are wrapped at the caller's dtype
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = backward
    return out


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss.

    Gradients accumulate into ``.grad`` of every tensor on a path from a
    ``requires_grad`` leaf to the loss. Parameters not reachable from the
    loss simply keep ``grad=None`` (treated as zero downstream).
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    # collect the recorded subgraph below the loss
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    loss.grad = np.ones_like(loss.data)
    for t in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        if t._bwd is not None and t.grad is not None:
            t._bwd(t.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    p = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bwd(g):
        a._accumulate(g * p * (1.0 - p))

    return _make(p, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    out_data = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)

    def bwd(g):
        s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        a._accumulate(g * s)

    return _make(out_data, (a,), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    take_a = a.data >= b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(np.where(take_a, a.data, b.data), (a, b), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(ge, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        if axis is None:
            a._accumulate(np.full(a.shape, g / n, dtype=a.dtype))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(ge / n, a.shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; ties route the gradient to the earliest index."""
    arg = np.argmax(a.data, axis=axis)  # first maximal index on ties
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(ga)

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape / indexing primitives
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bwd(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        a._accumulate(ga)

    return _make(a.data[idx], (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D weights b and 2-D/estacked a (numpy matmul rules)."""

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# network layer primitives
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """(B,T,C) -> padded copy and (B,T',k*C) column view stack."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (0, 0)))
    b, t, c = x.shape
    t_out = (t - k) // stride + 1
    cols = np.stack([x[:, j:j + stride * t_out:stride, :] for j in range(k)], axis=2)
    return x, cols.reshape(b, t_out, k * c), t_out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution: x (B,T,C_in), weight (k,C_in,C_out), bias (C_out,).

    Output length T' = floor((T + 2p - k)/s) + 1 with zero padding.
    """
    k, c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ConfigurationError(f"conv1d: input has {x.shape[-1]} channels, weight expects {c_in}")
    if k < 1 or stride < 1 or padding < 0 or x.shape[-2] + 2 * padding < k:
        raise ConfigurationError("conv1d: invalid geometry")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    _, cols, t_out = _im2col(xd, k, stride, padding)
    wmat = weight.data.reshape(k * c_in, c_out)
    out_data = cols @ wmat + bias.data
    if squeeze:
        out_data = out_data[0]

    def bwd(g):
        gd = g[None] if squeeze else g
        if bias.requires_grad:
            bias._accumulate(gd.sum(axis=(0, 1)))
        if weight.requires_grad:
            gw = np.einsum("btl,bto->lo", cols, gd)
            weight._accumulate(gw.reshape(k, c_in, c_out))
        if x.requires_grad:
            gcols = (gd @ wmat.T).reshape(gd.shape[0], t_out, k, c_in)
            t_pad = xd.shape[1] + 2 * padding
            gx = np.zeros((gd.shape[0], t_pad, c_in), dtype=xd.dtype)
            for j in range(k):
                gx[:, j:j + stride * t_out:stride, :] += gcols[:, :, j, :]
            gx = gx[:, padding:t_pad - padding, :] if padding else gx
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data, (x, weight, bias), bwd)


def deconv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed temporal convolution, fixed kernel 4 / stride 2 / padding 1.

    Maps (B,T,C_in) to exactly (B,2T,C_out); the adjoint of a stride-2
    kernel-4 convolution, which guarantees the 2x upsampling the decoder
    levels rely on.
    """
    k, c_in, c_out = weight.shape
    if k != 4:
        raise ConfigurationError("deconv1d uses a fixed kernel of 4")
    if x.shape[-1] != c_in:
        raise ConfigurationError(f"deconv1d: input has {x.shape[-1]} channels, weight expects {c_in}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b, t, _ = xd.shape
    out_data = np.tile(bias.data, (b, 2 * t, 1)).astype(xd.dtype)
    # output position p = 2t + j - 1 for tap j
    spans = []
    for j in range(k):
        t0 = max(0, (2 - j) // 2)  # first t with p >= 0
        t1 = min(t, (2 * t - j) // 2 + (1 if (2 * t - j) % 2 else 0))  # p < 2t
        t1 = t if 2 * (t - 1) + j - 1 < 2 * t else t - 1
        p0 = 2 * t0 + j - 1
        spans.append((t0, t1, p0))
        if t1 > t0:
            out_data[:, p0:p0 + 2 * (t1 - t0):2, :] += xd[:, t0:t1, :] @ weight.data[j]
    if squeeze:
        out_data = out_data[0]

    def bwd(g):
        gd = g[None] if squeeze else g
        if bias.requires_grad:
            bias._accumulate(gd.sum(axis=(0, 1)))
        gx = np.zeros_like(xd) if x.requires_grad else None
        for j, (t0, t1, p0) in enumerate(spans):
            if t1 <= t0:
                continue
            gslice = gd[:, p0:p0 + 2 * (t1 - t0):2, :]
            if weight.requires_grad:
                weight._accumulate_j = None  # placeholder removed below
            if weight.requires_grad:
                gw_j = np.einsum("bti,bto->io", xd[:, t0:t1, :], gslice)
                if weight.grad is None:
                    weight.grad = np.zeros_like(weight.data)
                weight.grad[j] += gw_j
            if gx is not None:
                gx[:, t0:t1, :] += gslice @ weight.data[j].T
        if gx is not None:
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data, (x, weight, bias), bwd)


def group_norm(x: Tensor, scale: Tensor, shift: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B,T,C) per (sample, channel group) over time and group channels."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b, t, c = xd.shape
    if c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible by {groups} groups")
    cg = c // groups
    xg = xd.reshape(b, t, groups, cg)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    xhat_flat = xhat.reshape(b, t, c)
    out_data = xhat_flat * scale.data + shift.data
    if squeeze:
        out_data = out_data[0]

    def bwd(g):
        gd = g[None] if squeeze else g
        if shift.requires_grad:
            shift._accumulate(gd.sum(axis=(0, 1)))
        if scale.requires_grad:
            scale._accumulate((gd * xhat_flat).sum(axis=(0, 1)))
        if x.requires_grad:
            gh = (gd * scale.data).reshape(b, t, groups, cg)
            m1 = gh.mean(axis=(1, 3), keepdims=True)
            m2 = (gh * xhat).mean(axis=(1, 3), keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
            gx = gx.reshape(b, t, c)
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data, (x, scale, shift), bwd)


def max_pool1d(x: Tensor) -> Tensor:
    """Windowed maximum, kernel 2 stride 2; ties route gradient to the earlier index."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    t_even = (xd.shape[1] // 2) * 2
    lo = xd[:, 0:t_even:2, :]
    hi = xd[:, 1:t_even:2, :]
    take_lo = lo >= hi
    out_data = np.where(take_lo, lo, hi)
    if squeeze:
        out_data = out_data[0]

    def bwd(g):
        gd = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        gx[:, 0:t_even:2, :] = gd * take_lo
        gx[:, 1:t_even:2, :] = gd * ~take_lo
        x._accumulate(gx[0] if squeeze else gx)

    return _make(out_data, (x,), bwd)


def _resample_index(m: int, n: int):
    pos = np.arange(n) * (m - 1) / (n - 1)
    i0 = np.minimum(pos.astype(np.int64), m - 2)
    w = pos - i0
    return i0, w


def linear_interpolate(x: Tensor, n: int) -> Tensor:
    """Resample (...,M,C) to (...,N,C) with endpoint-preserving linear blending."""
    m = x.shape[-2]
    if m < 2 or n < 2:
        raise ValueError("linear_interpolate requires source and target lengths >= 2")
    i0, w = _resample_index(m, n)
    wcol = w.reshape(-1, 1).astype(x.dtype)
    out_data = (1.0 - wcol) * np.take(x.data, i0, axis=-2) + wcol * np.take(x.data, i0 + 1, axis=-2)

    def bwd(g):
        gx = np.zeros_like(x.data)
        flat_g = g.reshape(-1, n, g.shape[-1])
        flat_gx = gx.reshape(-1, m, gx.shape[-1])
        for bi in range(flat_g.shape[0]):
            np.add.at(flat_gx[bi], i0, (1.0 - wcol) * flat_g[bi])
            np.add.at(flat_gx[bi], i0 + 1, wcol * flat_g[bi])
        x._accumulate(flat_gx.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def interp_at(x: Tensor, pos: Tensor) -> Tensor:
    """Sample a (J,C) map at fractional positions (N,), clamped to [0, J-1].

    Differentiable in both the map values and the positions, which lets
    boundary-adjustment gradients flow into the segment coordinates.
    """
    j = x.shape[0]
    u = np.clip(pos.data, 0.0, j - 1)
    in_range = (pos.data >= 0.0) & (pos.data <= j - 1)
    i0 = np.minimum(u.astype(np.int64), j - 2) if j > 1 else np.zeros_like(u, dtype=np.int64)
    if j == 1:
        raise ValueError("interp_at needs a map of length >= 2")
    w = (u - i0).reshape(-1, 1)
    f0 = x.data[i0]
    f1 = x.data[i0 + 1]
    out_data = (1.0 - w) * f0 + w * f1

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, i0, (1.0 - w) * g)
            np.add.at(gx, i0 + 1, w * g)
            x._accumulate(gx)
        if pos.requires_grad:
            gpos = ((f1 - f0) * g).sum(axis=1) * in_range
            pos._accumulate(gpos)

    return _make(out_data, (x, pos), bwd)
