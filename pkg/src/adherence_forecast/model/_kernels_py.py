"""Pure-numpy attention and layer-norm kernels.

Same signatures and semantics as the compiled ``_kernels`` extension; used
when the extension is unavailable or ``ADHERENCE_PURE_PYTHON=1`` is set.
All arrays are float64 and C-contiguous; ``mask`` is (B, T) bool with True
on real positions. Attention weights on masked keys are exactly zero, and
rows for masked queries are all zero (their outputs are never consumed).
"""

import numpy as np


def _split(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, h * dh)


def _weights(probs, keep, inv_keep):
    return probs if keep is None else probs * (keep * inv_keep)


def attention_forward(q, k, v, mask, n_heads, keep=None, inv_keep=1.0):
    """Masked scaled dot-product attention over ``n_heads`` heads.

    Returns ``(context (B, T, D), probs (B, H, T, T))``. ``keep`` is an
    optional (B, H, T, T) bool dropout mask; kept weights are scaled by
    ``inv_keep``.
    """
    dh = q.shape[2] // n_heads
    qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    keys = mask[:, None, None, :]
    scores = np.where(keys, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.where(keys, np.exp(scores), 0.0)
    probs = e / e.sum(axis=-1, keepdims=True) * mask[:, None, :, None]
    return _merge(_weights(probs, keep, inv_keep) @ vh), probs


def attention_backward(dctx, q, k, v, probs, mask, n_heads, keep=None, inv_keep=1.0):
    """Gradients of ``attention_forward`` w.r.t. q, k and v."""
    dh = q.shape[2] // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
    dc = _split(dctx, n_heads)
    dv = _weights(probs, keep, inv_keep).transpose(0, 1, 3, 2) @ dc
    dp = _weights(dc @ vh.transpose(0, 1, 3, 2), keep, inv_keep)
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dq = ds @ kh * scale
    dk = ds.transpose(0, 1, 3, 2) @ qh * scale
    return _merge(dq), _merge(dk), _merge(dv)


def layer_norm_forward(x, gamma, beta, eps):
    """Normalize over the last axis. Returns ``(y, xhat, inv_std)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, xhat, inv_std[..., 0]


def layer_norm_backward(dy, xhat, inv_std, gamma):
    """Returns ``(dx, dgamma, dbeta)``; parameter grads summed over leading axes."""
    g = dy * gamma
    m1 = g.mean(axis=-1, keepdims=True)
    m2 = (g * xhat).mean(axis=-1, keepdims=True)
    dx = (g - m1 - xhat * m2) * inv_std[..., None]
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)
