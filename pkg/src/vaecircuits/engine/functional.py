"""Differentiable ops: exactly the set the convolutional VAE needs.

Every op takes Tensors (plain floats are accepted where noted), computes a
float64 forward value, fails fast on non-finite output, and records a tape
node when any input requires grad. No general broadcasting.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, as_tensor, record


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return record("add", a.data + c, (a,), lambda g: (g,))
    _same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return record("sub", a.data - c, (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return record("mul", a.data * c, (a,), lambda g: (g * c,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return record("log", out, (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return record("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against a constant target.

    Fused for stability: max(l, 0) - l*t + log1p(exp(-|l|)).
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    l = logits.data
    out = np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))
    return record("bce_with_logits", out, (logits,), lambda g: (g * (_sigmoid(l) - t),))


# ------------------------------------------------------------------ reductions

def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        axes = (axis,) if isinstance(axis, int) else axis
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis), 1.0 / n)


# -------------------------------------------------------------------- structure

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along the batch axis (or any axis)."""
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def take_column(a: Tensor, j: int) -> Tensor:
    if a.ndim != 2 or not 0 <= j < a.shape[1]:
        raise ShapeError(f"take_column: column {j} invalid for shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, j] = g
        return (full,)

    return record("take_column", a.data[:, j].copy(), (a,), bw)


def permute_dims(z: Tensor, perms: np.ndarray) -> Tensor:
    """Independently permute each column of a (batch, dim) tensor.

    ``perms`` has shape (dim, batch); column d of the output is
    ``z[perms[d], d]``.
    """
    if z.ndim != 2:
        raise ShapeError(f"permute_dims: expected (batch, dim), got {z.shape}")
    b, d = z.shape
    perms = np.asarray(perms, dtype=np.int64)
    if perms.shape != (d, b):
        raise ShapeError(f"permute_dims: perms shape {perms.shape} != {(d, b)}")
    cols = np.arange(d)
    rows = perms.T  # (batch, dim)
    out = z.data[rows, cols[None, :]]

    def bw(g):
        full = np.zeros((b, d))
        np.add.at(full, (rows, np.broadcast_to(cols, rows.shape)), g)
        return (full,)

    return record("permute_dims", out, (z,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (batch, classes) logits against int labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    l = logits.data
    shifted = l - l.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = l.shape[0]
    out = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return record("cross_entropy", np.asarray(out), (logits,), bw)


# ------------------------------------------------------------------------ dense

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (batch, in) @ w.T + b, with w shaped (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", out, inputs, bw)


# ------------------------------------------------------------------ convolution

def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (C*k*k, B*ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = as_strided(xp, shape=(b, c, k, k, ho, wo), strides=(sb, sc, sh, sw, sh * s, sw * s))
    return view.transpose(1, 2, 3, 0, 4, 5).reshape(c * k * k, b * ho * wo)


def _col2im(cols: np.ndarray, b: int, c: int, hp: int, wp: int, k: int, s: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col. Returns channel-major (C, B, Hp, Wp)."""
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[:, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
           padding: int = 1) -> Tensor:
    """Cross-correlation of x (B, C, H, W) with w (O, C, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, c, h, wdt = x.shape
    o, _, k, _ = w.shape
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
    s, p = stride, padding
    hp, wp = h + 2 * p, wdt + 2 * p
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")
    cols = _im2col(_pad(x.data, p), k, s, ho, wo)
    wm = w.data.reshape(o, -1)
    out = (wm @ cols).reshape(o, bsz, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = None
        if x.requires_grad:
            full = _col2im(wm.T @ gm, bsz, c, hp, wp, k, s, ho, wo)
            gx = np.ascontiguousarray(full[:, :, p:p + h, p:p + wdt].transpose(1, 0, 2, 3))
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
                     padding: int = 1) -> Tensor:
    """Transposed convolution of x (B, Cin, H, W) with w (Cin, Cout, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, cin, h, wdt = x.shape
    _, cout, k, _ = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias {b.shape} does not match {cout} channels")
    s, p = stride, padding
    hf, wf = (h - 1) * s + k, (wdt - 1) * s + k
    hout, wout = hf - 2 * p, wf - 2 * p
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv_transpose2d: padding {p} too large for input {x.shape}")
    xm = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    wm = w.data.reshape(cin, cout * k * k)
    full = _col2im(wm.T @ xm, bsz, cout, hf, wf, k, s, h, wdt)
    out = full[:, :, p:p + hout, p:p + wout].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        cols = _im2col(_pad(g, p), k, s, h, wdt)  # (cout*k*k, B*h*w)
        gx = gw = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                (wm @ cols).reshape(cin, bsz, h, wdt).transpose(1, 0, 2, 3))
        if w.requires_grad:
            gw = (xm @ cols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv_transpose2d", out, inputs, bw)
