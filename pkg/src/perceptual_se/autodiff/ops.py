"""Differentiable op catalogue.

Conv-family ops use channel-last layout: feature maps are (N, T, F, C)
with T the time axis and F the frequency axis.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from .tensor import ShapeError, Tensor, as_tensor, make_node

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_GELU_C = math.sqrt(2.0 / math.pi)


def _coerce(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("add", a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("sub", a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("mul", a, b)

    def bwd(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bwd(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    return make_node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def square(a: Tensor) -> Tensor:
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def abs(a: Tensor) -> Tensor:
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log1p(a: Tensor) -> Tensor:
    return make_node(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_node(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bwd(g):
        # 0.5 (1 + th) + 0.5 x (1 - th^2) * sqrt(2/pi) (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= x
        d *= 1.0 - th * th
        d += 0.5 * (1.0 + th)
        d *= g
        return (d,)
    return make_node(out, (a,), bwd, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Gradient is identity on the closed interval [lo, hi], zero outside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_node(out, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return make_node(out, (a,), bwd, "log_softmax")


# ---------------------------------------------------------------- reductions & shape

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_node(np.asarray(out), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return make_node(np.asarray(out), (a,), bwd, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for {a.ndim}-d input")
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"shape {t.shape} incompatible with {ref} along axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))
    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return make_node(np.array(out), (a,), bwd, "slice")


def pad(a: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return make_node(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return make_node(a.data @ b.data, (a, b), bwd, "matmul")


def max_pool(a: Tensor, axis: int, size: int) -> Tensor:
    """Non-overlapping max pooling along one axis; a ragged tail forms its own window."""
    ax = axis % a.ndim
    n = a.shape[ax]
    n_out = -(-n // size)
    padded_len = n_out * size
    x = a.data
    if padded_len != n:
        widths = [(0, 0)] * a.ndim
        widths[ax] = (0, padded_len - n)
        x = np.pad(x, widths, constant_values=-np.inf)
    xm = np.moveaxis(x, ax, -1)
    lead = xm.shape[:-1]
    win = xm.reshape(lead + (n_out, size))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gm = np.moveaxis(g, ax, -1)
        gw = np.zeros(lead + (n_out, size), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], gm[..., None], axis=-1)
        gx = gw.reshape(lead + (padded_len,))[..., :n]
        return (np.ascontiguousarray(np.moveaxis(gx, -1, ax)),)
    return make_node(np.moveaxis(out, -1, ax).copy(), (a,), bwd, "max_pool")


# ---------------------------------------------------------------- conv family

def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: tuple = (1, 1), padding: tuple = (1, 1)) -> Tensor:
    """2-d convolution (cross-correlation) over (time, freq) with zero padding.

    x: (N, T, F, Cin); w: (kt, kf, Cin, Cout); b: (Cout,).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", f"input {x.shape} and kernel {w.shape} disagree on channels")
    n, t, f, cin = x.shape
    kt, kf, _, cout = w.shape
    st, sf = stride
    pt, pf = padding
    to, fo = _conv_out(t, kt, st, pt), _conv_out(f, kf, sf, pf)
    if to < 1 or fo < 1:
        raise ShapeError("conv2d", f"input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (pt, pt), (pf, pf), (0, 0)))
    # one matmul per kernel tap over a strided view; avoids materializing im2col
    taps = [(i, j, (slice(None), slice(i, i + st * (to - 1) + 1, st), slice(j, j + sf * (fo - 1) + 1, sf)))
            for i in range(kt) for j in range(kf)]
    out = np.zeros((n, to, fo, cout), dtype=np.result_type(x.dtype, w.dtype))
    for i, j, sl in taps:
        out += xp[sl] @ w.data[i, j]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = gw = gb = None
        if w.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(w.data)
            for i, j, sl in taps:
                gw[i, j] = xp[sl].reshape(-1, cin).T @ g2
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, sl in taps:
                gxp[sl] += g @ w.data[i, j].T
            gx = gxp[:, pt:pt + t, pf:pf + f, :]
        return (gx, gw) if b is None else (gx, gw, gb)
    return make_node(out, parents, bwd, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, T, F, C) -> (N, C), mean over time and frequency."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected 4-d input, got {x.shape}")
    return mean(x, axis=(1, 2))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of an (N, T, F, C) map.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance for the running estimate).
    """
    if x.ndim != 4 or x.shape[-1] != gamma.shape[0]:
        raise ShapeError("batch_norm2d", f"input {x.shape} vs {gamma.shape[0]} channels")
    axes = (0, 1, 2)
    if training:
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gbeta
    return make_node(out.astype(x.dtype), (x, gamma, beta), bwd, "batch_norm2d")


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Single GRU step.

    x: (B, I); h: (B, H); w_ih: (I, 3H); w_hh: (H, 3H); biases (3H,).
    Gate order is reset, update, candidate:
        r = sigmoid(x Wr + h Ur), z = sigmoid(x Wz + h Uz),
        n = tanh(x Wn + r * (h Un)), h' = (1 - z) * n + z * h.
    """
    hs = h.shape[-1]
    if x.shape[-1] != w_ih.shape[0] or w_ih.shape[1] != 3 * hs or w_hh.shape != (hs, 3 * hs):
        raise ShapeError("gru_cell", f"x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    gi = x.data @ w_ih.data + b_ih.data
    gh = h.data @ w_hh.data + b_hh.data
    r = _sigmoid(gi[:, :hs] + gh[:, :hs])
    z = _sigmoid(gi[:, hs:2 * hs] + gh[:, hs:2 * hs])
    hn = gh[:, 2 * hs:]
    n = np.tanh(gi[:, 2 * hs:] + r * hn)
    out = (1.0 - z) * n + z * h.data

    def bwd(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (h.data - n) * z * (1.0 - z)
        dr = dn * hn * r * (1.0 - r)
        dgi = np.concatenate([dr, dz, dn], axis=1)
        dgh = np.concatenate([dr, dz, dn * r], axis=1)
        gx = dgi @ w_ih.data.T if x.requires_grad else None
        gh_ = dgh @ w_hh.data.T + g * z if h.requires_grad else None
        gwi = x.data.T @ dgi if w_ih.requires_grad else None
        gwh = h.data.T @ dgh if w_hh.requires_grad else None
        gbi = dgi.sum(axis=0) if b_ih.requires_grad else None
        gbh = dgh.sum(axis=0) if b_hh.requires_grad else None
        return gx, gh_, gwi, gwh, gbi, gbh
    return make_node(out, (x, h, w_ih, w_hh, b_ih, b_hh), bwd, "gru_cell")


# ---------------------------------------------------------------- sequence losses

def ctc_loss(log_probs: Tensor, targets: Sequence[Sequence[int]],
             lengths: Optional[Sequence[int]] = None, blank: int = 0) -> Tensor:
    """Mean over the batch of -log p(target | log_probs) under CTC.

    log_probs: (B, T, N) per-frame log posteriors (any normalization);
    ``lengths`` gives the valid frame count per sequence (default T).
    Raises CTCLengthError when a target cannot fit in its frames.
    """
    if log_probs.ndim != 3:
        raise ShapeError("ctc_loss", f"expected (B, T, N) log-probs, got {log_probs.shape}")
    bsz, t_max, n_sym = log_probs.shape
    if len(targets) != bsz:
        raise ShapeError("ctc_loss", f"{len(targets)} targets for batch of {bsz}")
    lengths = [t_max] * bsz if lengths is None else [int(v) for v in lengths]
    lp = np.ascontiguousarray(log_probs.data, dtype=np.float64)
    total = 0.0
    grad = np.zeros_like(lp)
    for i in range(bsz):
        tgt = np.asarray(targets[i], dtype=np.int64)
        if tgt.size and (tgt.min() < 0 or tgt.max() >= n_sym or (tgt == blank).any()):
            raise ShapeError("ctc_loss", f"target symbols must be in 1..{n_sym - 1} excluding blank")
        nll, g = _kernels.ctc_forward_backward(lp[i, :lengths[i]], tgt, blank)
        total += nll
        grad[i, :lengths[i]] = g
    out = np.asarray(total / bsz, dtype=log_probs.dtype)

    def bwd(go):
        return ((go * grad / bsz).astype(log_probs.dtype),)
    return make_node(out, (log_probs,), bwd, "ctc_loss")
