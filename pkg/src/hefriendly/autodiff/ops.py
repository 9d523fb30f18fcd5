"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects, computes its forward
value with numpy, and, when any input requires a gradient, appends a node with
a backward closure to the active tape.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DataError, DimensionError, InvariantError, NumericError
from .tensor import Tensor, current_tape


def _emit(op, inputs, out_data, backward, saved=None) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericError(f"{op}: forward produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    tape = current_tape() if requires else None
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, inputs, out, backward, saved)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        "mul", (a, b), ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(
        "mean", (x,), np.asarray(x.data.mean()),
        lambda g: (np.full(shape, np.ravel(g)[0] / n),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension, row-major."""
    return reshape(x, (x.shape[0], -1))


# -- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), xd * xd, lambda g: (2.0 * xd * g,))


def quadratic(x: Tensor, a: float, b: float) -> Tensor:
    """a*x^2 + b*x with constant (non-trainable) coefficients."""
    xd = x.data
    return _emit(
        "quadratic", (x,), a * xd * xd + b * xd,
        lambda g: ((2.0 * a * xd + b) * g,),
    )


def poly_act(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """a*x^2 + b*x with scalar tensors a and b shared by every element."""
    xd, av, bv = x.data, float(a.data.reshape(-1)[0]), float(b.data.reshape(-1)[0])
    ashape, bshape = a.shape, b.shape

    def back(g):
        return (
            (2.0 * av * xd + bv) * g,
            np.full(ashape, float(np.sum(g * xd * xd))),
            np.full(bshape, float(np.sum(g * xd))),
        )

    return _emit("poly_act", (x, a, b), av * xd * xd + bv * xd, back)


def weighted_act(x: Tensor, lam: float, a: Tensor, b: Tensor) -> Tensor:
    """(1 - lam) * relu(x) + lam * (a*x^2 + b*x) with lam held constant.

    The two boundary values short-circuit to the pure branches so that the
    blend agrees with them bit for bit.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"blend weight must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return relu(x)
    if lam == 1.0:
        return poly_act(x, a, b)
    xd = x.data
    av, bv = float(a.data.reshape(-1)[0]), float(b.data.reshape(-1)[0])
    mask = xd > 0
    out = (1.0 - lam) * np.where(mask, xd, 0.0) + lam * (av * xd * xd + bv * xd)
    ashape, bshape = a.shape, b.shape

    def back(g):
        dx = ((1.0 - lam) * mask + lam * (2.0 * av * xd + bv)) * g
        return (
            dx,
            np.full(ashape, lam * float(np.sum(g * xd * xd))),
            np.full(bshape, lam * float(np.sum(g * xd))),
        )

    return _emit("weighted_act", (x, a, b), out, back, {"lambda": lam})


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip this op entirely at evaluation time."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# -- softmax family -----------------------------------------------------------


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, back)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), p, back)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[i, index[i]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick needs (batch, k) and (batch,), got {x.shape}, {index.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _emit("pick", (x,), x.data[rows, index], back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"class index out of range [0, {n_classes})")
    return scale(mean(pick(log_softmax(logits), labels)), -1.0)


# -- layers -------------------------------------------------------------------


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y[i, j] = sum_k W[j, k] * x[i, k] + b[j]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"dense expects 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if W.shape[1] != x.shape[1] or W.shape[0] != b.shape[0]:
        raise DimensionError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def back(g):
        return g @ Wd, g.T @ xd, g.sum(axis=0)

    return _emit("dense", (x, W, b), out, back)


def same_padding(size: int, kernel: int, stride: int) -> tuple:
    """(before, after) zero padding giving ceil(size / stride) outputs."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _pad_input(xd, pads, pad_value):
    (top, bottom), (left, right) = pads
    if not (top or bottom or left or right):
        return xd
    n, c, h, w = xd.shape
    out = np.empty((n, c, h + top + bottom, w + left + right))
    if pad_value is None:
        out.fill(0.0)
    else:
        out[...] = np.asarray(pad_value, dtype=np.float64).reshape(1, c, 1, 1)
    out[:, :, top:top + h, left:left + w] = xd
    return out


def conv2d(
    x: Tensor,
    K: Tensor,
    b: Tensor,
    stride: int = 1,
    padding: str = "valid",
    pad_value: Optional[np.ndarray] = None,
) -> Tensor:
    """2-D cross-correlation over NCHW input with an (out, in, kh, kw) kernel.

    ``pad_value`` optionally fills the padded border with one constant per
    input channel instead of zero; batch-norm folding relies on it.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or K.ndim != 4 or b.ndim != 1:
        raise DimensionError(f"conv2d expects 4-D x and K, 1-D b; got {x.shape}, {K.shape}, {b.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = K.shape
    if ci != c or b.shape[0] != o:
        raise DimensionError(f"conv2d channel mismatch: x {x.shape}, K {K.shape}, b {b.shape}")
    if padding == "same":
        pads = (same_padding(h, kh, stride), same_padding(w, kw, stride))
    elif padding == "valid":
        pads = ((0, 0), (0, 0))
    else:
        raise ContractError(f"unknown padding {padding!r}")
    hp, wp = h + sum_pair(pads[0]), w + sum_pair(pads[1])
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = _pad_input(x.data, pads, pad_value)
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    Kflat = K.data.reshape(o, -1)
    out = (cols @ Kflat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = out + b.data.reshape(1, o, 1, 1)
    (top, _), (left, _) = pads
    kshape = K.shape

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dK = (g2.T @ cols).reshape(kshape)
        db = g2.sum(axis=0)
        dcols = (g2 @ Kflat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[..., i, j]
        dx = dxp[:, :, top:top + h, left:left + w]
        return dx, dK, db

    return _emit("conv2d", (x, K, b), np.ascontiguousarray(out), back)


def sum_pair(p):
    return p[0] + p[1]


def _pool_windows(x: Tensor, window, stride):
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4:
        raise DimensionError(f"pooling expects NCHW input, got {x.shape}")
    kh, kw = window
    _, _, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"pool window {kh}x{kw} exceeds input {h}x{w}")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win, ho, wo


def _tiles(x: Tensor, window, stride):
    """Strided views, one per window offset, when windows tile the input exactly."""
    kh, kw = window
    _, _, h, w = x.shape
    if stride != kh or stride != kw or h % kh or w % kw:
        return None
    return [x.data[:, :, i::kh, j::kw] for i in range(kh) for j in range(kw)]


def avg_pool2d(x: Tensor, window=(2, 2), stride: int = 2) -> Tensor:
    kh, kw = window
    win, ho, wo = _pool_windows(x, window, stride)
    tiles = _tiles(x, window, stride)
    if tiles is not None:
        shape = x.shape
        inv = 1.0 / (kh * kw)
        out = tiles[0].copy()
        for t in tiles[1:]:
            out += t
        out *= inv

        def back_tiled(g):
            dx = np.empty(shape)
            gi = g * inv
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i::kh, j::kw] = gi
            return (dx,)

        return _emit("avg_pool2d", (x,), out, back_tiled)
    out = win.mean(axis=(4, 5))
    shape = x.shape
    inv = 1.0 / (kh * kw)

    def back(g):
        dx = np.zeros(shape)
        gi = g * inv
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gi
        return (dx,)

    return _emit("avg_pool2d", (x,), out, back)


def max_pool2d(x: Tensor, window=(2, 2), stride: int = 2) -> Tensor:
    kh, kw = window
    win, ho, wo = _pool_windows(x, window, stride)
    tiles = _tiles(x, window, stride)
    if tiles is not None:
        out = tiles[0].copy()
        for t in tiles[1:]:
            np.maximum(out, t, out=out)
        # Route each gradient to the first maximal element of its window.
        masks, taken = [], np.zeros(out.shape, dtype=bool)
        for t in tiles:
            m = (t == out) & ~taken
            taken |= m
            masks.append(m)
        shape = x.shape

        def back_tiled(g):
            dx = np.empty(shape)
            k = 0
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i::kh, j::kw] = g * masks[k]
                    k += 1
            return (dx,)

        return _emit("max_pool2d", (x,), out, back_tiled)
    n, c = x.shape[:2]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        dx = np.zeros(shape)
        di, dj = np.divmod(arg, kw)
        nn, cc, hh, ww = np.indices(arg.shape)
        np.add.at(dx, (nn, cc, hh * stride + di, ww * stride + dj), g)
        return (dx,)

    return _emit("max_pool2d", (x,), out, back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over axis 1 of a 2-D or 4-D input.

    In training mode batch statistics normalize the input and the running
    estimates are updated in place (unbiased variance, exponential average).
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    for arr in (gamma.data, beta.data, running_mean, running_var):
        if np.shape(arr) != (c,):
            raise DimensionError(f"batch_norm parameters must have shape ({c},)")
    if np.any(np.asarray(running_var) < 0):
        raise InvariantError("running variance must be non-negative")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(bshape)

    if not training:
        sd = np.sqrt(running_var.reshape(bshape) + eps)
        inv = 1.0 / sd
        # Divide rather than multiply by inv so gamma=1, beta=0 gives (x - mu) / sd exactly.
        xhat = (xd - running_mean.reshape(bshape)) / sd
        out = xhat * gd + beta.data.reshape(bshape)

        def back(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _emit("batch_norm", (x, gamma, beta), out, back, {"mode": "eval"})

    m = xd.size // c
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gd * xhat + beta.data.reshape(bshape)
    unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def back(g):
        gs = g.sum(axis=axes, keepdims=True)
        gx = (g * xhat).sum(axis=axes, keepdims=True)
        dx = gd * inv / m * (m * g - gs - xhat * gx)
        return dx, gx.reshape(c), gs.reshape(c)

    return _emit("batch_norm", (x, gamma, beta), out, back, {"mode": "train"})
