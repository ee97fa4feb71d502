"""Fused primitives with hand-written backward rules.

These could be composed from the elementary ops in :mod:`tensor`, but fusing
them keeps the tape short, which dominates runtime at desk scale.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, as_tensor

_GELU_C = float(np.sqrt(2.0 / np.pi))


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis.

    Entries equal to ``-inf`` are masked out. A row in which every entry is
    masked produces all zeros rather than NaN.
    """
    x = as_tensor(x)
    xd = x.data
    m = np.max(xd, axis=-1, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    out = np.where(np.isnan(s), np.nan, out)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return Tensor._make(out, (x,), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    n_in, n_out = weight.shape
    if x.shape[-1] != n_in:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    wd = weight.data
    out = x2 @ wd
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, n_out)
        grads = [(g2 @ wd.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)
    return Tensor._make(out.reshape(lead + (n_out,)), parents, bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return Tensor._make(out, (x, gamma, beta), bw)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * d,)
    return Tensor._make(out, (x,), bw)


def norm_lastdim(x) -> Tensor:
    """Euclidean norm over the last axis; the gradient at the origin is zero."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], xd / safe[..., None], 0.0) * g[..., None],)
    return Tensor._make(n, (x,), bw)


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    safe = np.where(r2 > 0, r2, 1.0)

    def bw(g):
        gy = np.where(r2 > 0, g * xd / safe, 0.0)
        gx = np.where(r2 > 0, -g * yd / safe, 0.0)
        return gy, gx
    return Tensor._make(np.arctan2(yd, xd), (y, x), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._make(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))
