"""Differentiable operations over :class:`~alignlab.core.tensor.Tensor`.

Broadcasting is deliberately narrow: operands must either have equal rank
(each axis equal or 1) or the lower-rank shape must match the trailing axes
of the higher-rank one exactly.  Anything else raises ``DimensionError``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, record_op


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if len(sa) == len(sb):
        for da, db in zip(sa, sb):
            if da != db and da != 1 and db != 1:
                raise DimensionError(f"shapes {sa} and {sb} do not broadcast")
        return
    lo, hi = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if lo != hi[len(hi) - len(lo):]:
        raise DimensionError(
            f"shapes {sa} and {sb}: lower-rank operand must match trailing axes exactly"
        )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.values + b.values)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.values - b.values)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record_op("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.values * b.values)

    def vjp(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return record_op("mul", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.values)
    return record_op("neg", out, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.values * c)
    return record_op("scale", out, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked leading axes on either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.values, b.values))

    def vjp(g):
        bt = np.swapaxes(b.values, -1, -2)
        at = np.swapaxes(a.values, -1, -2)
        da = np.matmul(g, bt)
        db = np.matmul(at, g)
        return _unbroadcast_matmul(da, a.shape), _unbroadcast_matmul(db, b.shape)

    return record_op("matmul", out, (a, b), vjp)


def _unbroadcast_matmul(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.values.transpose(axes))
    return record_op("transpose", out, (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.values.reshape(shape))
    return record_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def narrow(a, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + size > a.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + size}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = Tensor(a.values[idx])

    def vjp(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        return (full,)

    return record_op("narrow", out, (a,), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        gs = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            gs.append(g[tuple(idx)])
        return tuple(gs)

    return record_op("concat", out, parts, vjp)


def take_rows(a, ids) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds (embedding lookup)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D table, got {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(a.values[ids.reshape(-1)].reshape(ids.shape + (a.shape[1],)))

    def vjp(g):
        da = np.zeros_like(a.values)
        np.add.at(da, ids.reshape(-1), g.reshape(-1, a.shape[1]))
        return (da,)

    return record_op("take_rows", out, (a,), vjp)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.values.sum()))
    return record_op("sum_all", out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.values.dtype, copy=True),))


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.values.dtype, copy=True),)

    return record_op("sum_axis", out, (a,), vjp)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.size)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.values)
    out = Tensor(y)
    return record_op("tanh", out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return record_op("sigmoid", out, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0))
    return record_op("relu", out, (a,), lambda g: (g * (a.values > 0),))


def silu(a) -> Tensor:
    """x * sigmoid(x), the swish activation."""
    a = as_tensor(a)
    x = a.values
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(x * s)
    return record_op("silu", out, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.values)
    out = Tensor(y)
    return record_op("exp", out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.values))
    return record_op("log", out, (a,), lambda g: (g / a.values,))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a nonempty last axis, got {a.shape}")
    y = _softmax_last(a.values)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return record_op("softmax_rows", out, (a,), vjp)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"log_softmax_rows needs a nonempty last axis, got {a.shape}")
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(out.values)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return record_op("log_softmax_rows", out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise DimensionError(f"layer_norm needs a nonempty last axis, got {x.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    out = Tensor(xhat * gain.values + bias.values)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gy = g * gain.values
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gy - m1 - xhat * m2)
        return dx, dgain, dbias

    return record_op("layer_norm", out, (x, gain, bias), vjp)


def rope_apply(x, positions, base: float = 10000.0) -> Tensor:
    """Rotate interleaved feature pairs by position-dependent angles.

    ``x`` is ``[..., T, d_head]`` with even ``d_head``; ``positions`` gives one
    integer position per sequence step.  Pairwise rotation is an isometry, so
    the backward pass applies the inverse rotation to the gradient.
    """
    x = as_tensor(x)
    dh = x.shape[-1]
    if dh % 2 != 0:
        raise ConfigError(f"rotary embedding needs an even head dim, got {dh}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[-2],):
        raise DimensionError(f"positions {positions.shape} must match sequence axis {x.shape[-2]}")
    half = dh // 2
    freqs = base ** (-2.0 * np.arange(half) / dh)
    ang = positions[:, None] * freqs[None, :]
    cos = np.cos(ang).astype(x.values.dtype)
    sin = np.sin(ang).astype(x.values.dtype)
    xe = x.values[..., 0::2]
    xo = x.values[..., 1::2]
    y = np.empty_like(x.values)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos
    out = Tensor(y)

    def vjp(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        return (dx,)

    return record_op("rope_apply", out, (x,), vjp)


def window_slices_1d(x, kernel: int) -> Tensor:
    """Unfold ``[B, T, C]`` into SAME-padded windows ``[B, T, kernel, C]``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"window_slices_1d expects [B, T, C], got {x.shape}")
    b, t, c = x.shape
    left = (kernel - 1) // 2
    right = kernel - 1 - left
    padded = np.pad(x.values, ((0, 0), (left, right), (0, 0)))
    win = np.empty((b, t, kernel, c), dtype=x.values.dtype)
    for k in range(kernel):
        win[:, :, k, :] = padded[:, k:k + t, :]
    out = Tensor(win)

    def vjp(g):
        dpad = np.zeros_like(padded)
        for k in range(kernel):
            dpad[:, k:k + t, :] += g[:, :, k, :]
        return (dpad[:, left:left + t, :],)

    return record_op("window_slices_1d", out, (x,), vjp)


def _same_pad(n_in: int, kernel: int, stride: int) -> tuple:
    # Left pad is fixed at (k-1)//2 so window alignment does not depend on
    # sequence length; output length is ceil(n/stride).
    n_out = -(-n_in // stride)
    left = (kernel - 1) // 2
    right = max(stride * (n_out - 1) + kernel - left - n_in, 0)
    return n_out, left, right


def window_slices_2d(x, kernel: int, stride: int) -> Tensor:
    """Unfold ``[B, T, F, C]`` into strided SAME patches ``[B, T', F', k*k*C]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"window_slices_2d expects [B, T, F, C], got {x.shape}")
    b, t, f, c = x.shape
    t_out, tl, tr = _same_pad(t, kernel, stride)
    f_out, fl, fr = _same_pad(f, kernel, stride)
    padded = np.pad(x.values, ((0, 0), (tl, tr), (fl, fr), (0, 0)))
    win = np.empty((b, t_out, f_out, kernel, kernel, c), dtype=x.values.dtype)
    for kt in range(kernel):
        for kf in range(kernel):
            win[:, :, :, kt, kf, :] = padded[:, kt:kt + stride * t_out:stride, kf:kf + stride * f_out:stride, :]
    out = Tensor(win.reshape(b, t_out, f_out, kernel * kernel * c))

    def vjp(g):
        g = g.reshape(b, t_out, f_out, kernel, kernel, c)
        dpad = np.zeros_like(padded)
        for kt in range(kernel):
            for kf in range(kernel):
                dpad[:, kt:kt + stride * t_out:stride, kf:kf + stride * f_out:stride, :] += g[:, :, :, kt, kf, :]
        return (dpad[:, tl:tl + t, fl:fl + f, :],)

    return record_op("window_slices_2d", out, (x,), vjp)
