"""Encoder building blocks on :class:`Tensor`.

All functions accept plain arrays as well as tensors and operate on the last
two axes, so a leading batch axis is allowed everywhere.
"""

from __future__ import annotations

import math

from .tensor import Tensor, as_tensor, layer_norm as _layer_norm, relu, softmax


class ConfigurationError(ValueError):
    """Shapes or hyperparameters that cannot work together."""


def linear(x, weight, bias=None) -> Tensor:
    out = as_tensor(x) @ as_tensor(weight)
    return out if bias is None else out + as_tensor(bias)


def attention_weights(q, k) -> Tensor:
    q, k = as_tensor(q), as_tensor(k)
    d_k = q.shape[-1]
    return softmax((q * (1.0 / math.sqrt(d_k))) @ k.swapaxes(-1, -2), axis=-1)


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V, row-wise softmax."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ConfigurationError(
            f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}"
        )
    return attention_weights(q, k) @ v


def multi_head_attention(x, params: dict, n_heads: int, prefix: str = "") -> Tensor:
    """Self-attention over the sequence axis of ``x`` ([..., L, d_model]).

    ``params`` holds ``{prefix}wq, bq, wk, bk, wv, bv, wo, bo``; the per-head
    projections W_i are column blocks of the full ``wq``/``wk``/``wv``.
    """
    x = as_tensor(x)
    d_model = x.shape[-1]
    if d_model % n_heads:
        raise ConfigurationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    wq = params[prefix + "wq"]
    if wq.shape != (d_model, d_model):
        raise ConfigurationError(f"projection shape {wq.shape} does not match d_model={d_model}")
    d_k = d_model // n_heads
    lead = x.shape[:-2]
    length = x.shape[-2]

    def split(t: Tensor) -> Tensor:
        t = t.reshape(*lead, length, n_heads, d_k)
        nd = t.ndim
        return t.swapaxes(nd - 3, nd - 2)  # [..., h, L, d_k]

    q = split(linear(x, wq, params[prefix + "bq"]))
    k = split(linear(x, params[prefix + "wk"], params[prefix + "bk"]))
    v = split(linear(x, params[prefix + "wv"], params[prefix + "bv"]))
    heads = scaled_dot_attention(q, k, v)
    nd = heads.ndim
    concat = heads.swapaxes(nd - 3, nd - 2).reshape(*lead, length, d_model)
    return linear(concat, params[prefix + "wo"], params[prefix + "bo"])


def feed_forward(h, w1, b1, w2, b2) -> Tensor:
    """Position-wise ReLU(H W1 + b1) W2 + b2."""
    return linear(relu(linear(h, w1, b1)), w2, b2)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    return _layer_norm(as_tensor(x), as_tensor(scale), as_tensor(shift), eps)
