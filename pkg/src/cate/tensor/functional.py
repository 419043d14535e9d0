"""Neural-network operations built on the tape in :mod:`cate.tensor.core`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    DimensionError,
    Tensor,
    _result,
    as_tensor,
    matmul,
    mul,
    swapaxes,
    tsum,
)


def conv2d(x, kernel, stride: int = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """2D cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (F,C,kh,kw).

    ``padding`` is zero padding per side, either one int or (ph, pw).
    Implemented as im2col over a strided window view; the input gradient is
    scattered back with one strided add per kernel offset.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if stride < 1 or ph < 0 or pw < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    # (N, C, Ho, Wo, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # (kh, kw, N, C, Ho, Wo) so every offset slice is contiguous
            gcols = np.ascontiguousarray((gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def layer_norm(x, axes=-1, eps: float = 1e-5) -> Tensor:
    """Normalise ``x`` to zero mean, unit variance over ``axes`` (no affine)."""
    x = as_tensor(x)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, (x,), backward, "layer_norm")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def dropout(x, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; the identity when ``p == 0`` or not training."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def l2_normalize(x, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale ``x`` to unit Euclidean norm along ``axis``.

    A zero vector is an error unless ``eps`` > 0 is given.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if eps <= 0.0 and np.any(norm == 0.0):
        raise ZeroDivisionError("cannot normalise a zero vector")
    denom = np.maximum(norm, eps) if eps > 0 else norm
    out = x.data / denom

    def backward(g):
        # d(x/|x|) = (g - u (u.g)) / |x|
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / denom,)

    return _result(out, (x,), backward, "l2_normalize")


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``; values in [-1, 1]."""
    sim = tsum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)
    # clipping only guards last-ulp overshoot
    if np.any(np.abs(sim.data) > 1.0):
        sim.data = np.clip(sim.data, -1.0, 1.0)
    return sim


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]}): {idx.min()}..{idx.max()}")
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (table,), backward, "embedding")


def scaled_dot_product_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    q = as_tensor(q)
    d = q.shape[-1]
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads: int) -> Tensor:
    """Self-attention block over tokens ``x`` of shape (B, L, H).

    Projection weights are (H, H) matrices applied on the right.
    """
    x = as_tensor(x)
    b, length, hidden = x.shape
    if hidden % n_heads:
        raise DimensionError(f"hidden size {hidden} not divisible by {n_heads} heads")
    hd = hidden // n_heads

    def split(t):
        return t.reshape(b, length, n_heads, hd).transpose(0, 2, 1, 3)

    q = split(matmul(x, wq) + bq)
    k = split(matmul(x, wk) + bk)
    v = split(matmul(x, wv) + bv)
    ctx = scaled_dot_product_attention(q, k, v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, length, hidden)
    return matmul(ctx, wo) + bo
