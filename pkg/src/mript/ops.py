"""Differentiable neural-network primitives built on the gradient tape.

Conventions: images are [C, H, W], token matrices are [..., N, D] with the
feature axis last. All ops validate operand dims eagerly and raise
``ValueError`` on mismatch rather than broadcasting silently.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .autodiff import Tensor, _emit, add, matmul, reshape, transpose

# re-exported here so model code can import every primitive from one place
from .autodiff import absolute, concat, mean_all, mul, roll, scale, sub, sum_all, take_rows  # noqa: F401

# python floats: numpy 2 would upcast float32 arrays against float64 scalars
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    # scipy's erf only has a float64 loop; fold the result back to the
    # input dtype so gradients do not silently upcast
    cdf = (0.5 * (1.0 + erf(x.data * _INV_SQRT2))).astype(x.data.dtype, copy=False)
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _emit(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((g - dot) * p,)

    return _emit(p.astype(x.data.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned affine parameters."""
    d = x.data.shape[-1]
    if gamma.dims != (d,) or beta.dims != (d,):
        raise ValueError(f"affine params must have dims ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: x @ w.T + b, w is [D_out, D_in]."""
    if x.data.ndim < 2:
        raise ValueError("linear input must have at least 2 dims")
    d_out, d_in = w.dims
    if x.data.shape[-1] != d_in:
        raise ValueError(f"linear input dim {x.data.shape[-1]} != weight dim {d_in}")
    if b.dims != (d_out,):
        raise ValueError(f"bias must have dims ({d_out},)")
    out = x.data @ w.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g @ w.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, d_in)) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit(out, (x, w, b), backward)


def _im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, k, k, h_out, w_out),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return win.reshape(c * k * k, h_out * w_out)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, channels-first, square odd kernel.

    x is [C, H, W], w is [O, C, k, k], b is [O]; output is
    [O, (H + 2 pad - k) // stride + 1, (W + 2 pad - k) // stride + 1].
    Implemented as im2col plus one GEMM; the column matrix stays alive on
    the tape so the weight-gradient GEMM can reuse it.
    """
    if x.data.ndim != 3:
        raise ValueError("conv2d input must be [C, H, W]")
    if w.data.ndim != 4 or w.dims[2] != w.dims[3]:
        raise ValueError("conv2d weight must be [O, C, k, k] with square kernel")
    o, c_w, k, _ = w.dims
    c, h, wd = x.dims
    if c != c_w:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c_w}")
    if k % 2 == 0 and k != stride:
        # even kernels only as non-overlapping patch embeddings (k == stride)
        raise ValueError("conv2d kernel must be odd unless k == stride")
    if b.dims != (o,):
        raise ValueError(f"bias must have dims ({o},)")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ValueError("kernel larger than padded input")

    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    w2 = w.data.reshape(o, c * k * k)
    cols = _im2col(xp, k, stride, h_out, w_out)
    out_mat = w2 @ cols
    out_mat += b.data[:, None]
    out = out_mat.reshape(o, h_out, w_out)

    def backward(g):
        gm = g.reshape(o, h_out * w_out)
        gb = gm.sum(axis=1) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.dims)
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ gm).reshape(c, k, k, h_out, w_out)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, i, j]
            gx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return _emit(out, (x, w, b), backward)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange [r^2 C, H, W] to [C, r H, r W]; channel (c r^2 + i r + j)
    lands on output offset (i, j) inside each r x r cell."""
    if r < 1:
        raise ValueError("upscale factor must be >= 1")
    cr2, h, w = x.dims
    if cr2 % (r * r) != 0:
        raise ValueError(f"channels {cr2} not divisible by r^2 = {r * r}")
    c = cr2 // (r * r)
    out = x.data.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)

    def backward(g):
        gx = g.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(cr2, h, w)
        return (np.ascontiguousarray(gx),)

    return _emit(np.ascontiguousarray(out), (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int, mask=None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q is [..., Nq, D], k and v are [..., Nk, D] / [..., Nk, Dv]; leading
    batch axes must agree. Heads split the feature axis; per-head outputs are
    concatenated back. ``mask`` is an additive bias broadcastable against the
    [..., heads, Nq, Nk] logits (a plain array or a Tensor, e.g. a learned
    relative-position table).
    """
    if q.data.ndim < 2 or k.data.ndim < 2 or v.data.ndim < 2:
        raise ValueError("attention operands must have at least 2 dims")
    *bq, nq, d = q.dims
    *bk, nk, dk = k.dims
    *bv, nv, dv = v.dims
    if dk != d:
        raise ValueError(f"query dim {d} != key dim {dk}")
    if nv != nk:
        raise ValueError(f"key count {nk} != value count {nv}")
    if bq != bk or bq != bv:
        raise ValueError("attention batch dims differ")
    if d % num_heads or dv % num_heads:
        raise ValueError(f"feature dims ({d}, {dv}) not divisible by {num_heads} heads")
    dh = d // num_heads
    dvh = dv // num_heads
    batch = tuple(bq)
    nb = len(batch)
    to_heads = tuple(range(nb)) + (nb + 1, nb, nb + 2)

    qh = transpose(reshape(q, batch + (nq, num_heads, dh)), to_heads)
    kh = transpose(reshape(k, batch + (nk, num_heads, dh)), to_heads)
    vh = transpose(reshape(v, batch + (nk, num_heads, dvh)), to_heads)

    swap_last = tuple(range(nb + 1)) + (nb + 2, nb + 1)
    logits = scale(matmul(qh, transpose(kh, swap_last)), 1.0 / np.sqrt(dh))
    if mask is not None:
        bias = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask), dtype=logits.dtype)
        logits = add(logits, bias)
    weights = softmax(logits, axis=-1)
    heads_out = matmul(weights, vh)
    merged = transpose(heads_out, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    return reshape(merged, batch + (nq, dv))
