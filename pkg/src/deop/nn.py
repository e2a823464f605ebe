"""Parameter initialization and shared transformer sub-blocks."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor

Params = dict  # name -> Tensor


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal(0.0, fan_in ** -0.5, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def normal(rng: np.random.Generator, shape: tuple, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return nc.add_bias(y, b) if b is not None else y


def init_attention(rng, prefix: str, d: int, cross: bool = False) -> Params:
    """Projection weights for multi-head attention (separate q and kv for cross)."""
    p = {}
    if cross:
        p[f"{prefix}.q_w"] = linear_init(rng, d, d)
        p[f"{prefix}.q_b"] = zeros(d)
        p[f"{prefix}.kv_w"] = linear_init(rng, d, 2 * d)
        p[f"{prefix}.kv_b"] = zeros(2 * d)
    else:
        p[f"{prefix}.qkv_w"] = linear_init(rng, d, 3 * d)
        p[f"{prefix}.qkv_b"] = zeros(3 * d)
    p[f"{prefix}.proj_w"] = linear_init(rng, d, d)
    p[f"{prefix}.proj_b"] = zeros(d)
    return p


def init_layer_norm(prefix: str, d: int) -> Params:
    return {f"{prefix}.g": ones(d), f"{prefix}.b": zeros(d)}


def init_mlp(rng, prefix: str, d: int, hidden: int, out: int | None = None) -> Params:
    return {
        f"{prefix}.fc1_w": linear_init(rng, d, hidden), f"{prefix}.fc1_b": zeros(hidden),
        f"{prefix}.fc2_w": linear_init(rng, hidden, out or d), f"{prefix}.fc2_b": zeros(out or d),
    }


def layer_norm(x: Tensor, p: Params, prefix: str) -> Tensor:
    return nc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def mlp(x: Tensor, p: Params, prefix: str) -> Tensor:
    h = nc.gelu(linear(x, p[f"{prefix}.fc1_w"], p[f"{prefix}.fc1_b"]))
    return linear(h, p[f"{prefix}.fc2_w"], p[f"{prefix}.fc2_b"])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[T, d]`` -> ``[h, T, d/h]``."""
    T, d = x.shape
    return nc.transpose(nc.reshape(x, (T, n_heads, d // n_heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """``[h, T, dh]`` -> ``[T, h*dh]``."""
    h, T, dh = x.shape
    return nc.reshape(nc.transpose(x, (1, 0, 2)), (T, h * dh))


def attention_probs(q: Tensor, k: Tensor) -> Tensor:
    """Per-head ``softmax(q k^T / sqrt(dh))`` for ``[h, T, dh]`` inputs."""
    dh = q.shape[-1]
    scores = nc.scale(q @ nc.transpose(k, (0, 2, 1)), dh ** -0.5)
    return nc.softmax(scores, axis=-1)


def multi_head_attention(xq: Tensor, xkv: Tensor, p: Params, prefix: str, n_heads: int) -> Tensor:
    """Cross (or self, when ``xq is xkv`` and weights are split) multi-head attention."""
    d = xq.shape[-1]
    q = linear(xq, p[f"{prefix}.q_w"], p[f"{prefix}.q_b"])
    kv = linear(xkv, p[f"{prefix}.kv_w"], p[f"{prefix}.kv_b"])
    k, v = kv[:, :d], kv[:, d:]
    probs = attention_probs(split_heads(q, n_heads), split_heads(k, n_heads))
    out = merge_heads(probs @ split_heads(v, n_heads))
    return linear(out, p[f"{prefix}.proj_w"], p[f"{prefix}.proj_b"])


def qkv_heads(x: Tensor, p: Params, prefix: str, n_heads: int) -> tuple[Tensor, Tensor, Tensor]:
    d = x.shape[-1]
    qkv = linear(x, p[f"{prefix}.qkv_w"], p[f"{prefix}.qkv_b"])
    return (split_heads(qkv[:, :d], n_heads), split_heads(qkv[:, d:2 * d], n_heads),
            split_heads(qkv[:, 2 * d:], n_heads))


def self_attention(x: Tensor, p: Params, prefix: str, n_heads: int) -> Tensor:
    """Standard multi-head self-attention with fused qkv projection."""
    q, k, v = qkv_heads(x, p, prefix, n_heads)
    out = merge_heads(attention_probs(q, k) @ v)
    return linear(out, p[f"{prefix}.proj_w"], p[f"{prefix}.proj_b"])
