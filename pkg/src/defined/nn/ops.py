"""Differentiable kernels used by the transformer.

Kernels work in the dtype of their inputs (float32 for the model, float64
for gradient checks). Reductions that feed normalizers or losses are
accumulated in float64.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeMismatch, Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap(b.data), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return ga, gb

    return make_result("matmul", a.data @ b.data, (a, b), bw)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is ``(d_in, d_out)``."""
    x, W = as_tensor(x), as_tensor(W)
    b = None if b is None else as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise ShapeMismatch("linear", x.shape, W.shape, () if b is None else b.shape)
    # flatten leading axes so numpy makes one GEMM call instead of a loop
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data
    if b is not None:
        out += b.data
    out = out.reshape(*x.shape[:-1], W.shape[1])
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return make_result("linear", out, parents, bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xhat = xd - mu
    rstd = (xhat * xhat).mean(axis=-1, keepdims=True)
    rstd += eps
    rstd = 1.0 / np.sqrt(rstd)
    xhat *= rstd
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gh *= xhat
            gx -= xhat * gh.mean(axis=-1, keepdims=True)
            gx *= rstd
        g2 = g.reshape(-1, d)
        gg = (g2 * xhat.reshape(-1, d)).sum(axis=0).astype(gamma.dtype, copy=False)
        gb = g2.sum(axis=0).astype(beta.dtype, copy=False)
        return gx, gg, gb

    return make_result("layer_norm", out, (x, gamma, beta), bw)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = z - z.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    p = _softmax(x.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_result("softmax_rows", p, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU (GPT-2 variant)."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    th = v2 * (0.044715 * _GELU_C)
    th += _GELU_C
    th *= v
    th = np.tanh(th)
    out = th + 1.0
    out *= v
    out *= 0.5

    def bw(g):
        du = v2 * (3 * 0.044715 * _GELU_C)
        du += _GELU_C
        sech2 = 1.0 - th * th
        sech2 *= du
        sech2 *= v
        sech2 += 1.0 + th
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return make_result("gelu", out, (x,), bw)


def causal_mask(L: int) -> np.ndarray:
    """Boolean ``(L, L)`` mask, True where attention is allowed (j <= i)."""
    return np.tril(np.ones((L, L), dtype=bool))


_MASK_BIAS: dict = {}


def _mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """Additive ``(Lk, Lq)`` bias: 0 where allowed, -inf elsewhere."""
    key = (mask.shape, mask.tobytes(), np.dtype(dtype).str)
    if key not in _MASK_BIAS:
        _MASK_BIAS[key] = np.where(_swap(mask), 0.0, -np.inf).astype(dtype)
    return _MASK_BIAS[key]


def _weights_t(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    # keys on axis -2: numpy reduces across rows much faster than along short rows
    s = k @ _swap(q)
    s *= 1.0 / math.sqrt(q.shape[-1])
    if mask is not None:
        s += _mask_bias(np.broadcast_to(mask, (q.shape[-2], k.shape[-2])), s.dtype)
    s -= s.max(axis=-2, keepdims=True)
    # exp(-inf) is exactly 0, so masked weights are exact zeros
    np.exp(s, out=s)
    s *= 1.0 / s.sum(axis=-2, keepdims=True)
    return s


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Row-stochastic ``(..., Lq, Lk)`` attention matrix."""
    return _swap(_weights_t(q, k, mask))


def scaled_dot_attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is a boolean array broadcastable to the score matrix with
    True marking allowed key positions; pass :func:`causal_mask` for
    decoder self-attention.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeMismatch("scaled_dot_attention", q.shape, k.shape, v.shape)
    pt = _weights_t(q.data, k.data, mask)
    out = _swap(pt) @ v.data
    scale = 1.0 / math.sqrt(q.shape[-1])

    def bw(g):
        gv = pt @ g
        gt = v.data @ _swap(g)
        gt -= (gt * pt).sum(axis=-2, keepdims=True)
        gt *= pt
        gt *= scale
        gt = gt.astype(q.dtype, copy=False)
        return _swap(gt) @ k.data, gt @ q.data, gv

    return make_result("scaled_dot_attention", out, (q, k, v), bw)


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log-softmax probability of integer ``target`` classes.

    ``logits`` has shape ``(..., C)`` and ``target`` the leading shape.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ShapeMismatch("cross_entropy", logits.shape, target.shape)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = target.size
    picked = np.take_along_axis(logp, target[..., None], axis=-1)
    loss = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None], np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return make_result("cross_entropy", loss, (logits,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, shape) from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    # materialise so downstream matmuls see contiguous operands
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result("getitem", x.data[idx], (x,), bw)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return make_result("sum", out, (x,), lambda g: (np.full_like(x.data, g),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return make_result("mean", out, (x,), lambda g: (np.full_like(x.data, g / n),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(x.shape for x in xs)) from None
    return make_result("concat", out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))
