"""Transformer building blocks expressed over :class:`Tensor` ops."""

from __future__ import annotations

import numpy as np

from .optim import ConfigError
from .tensor import Tensor, gelu, layer_norm, matmul, softmax, transpose


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 is a permuted-congruential generator, same quality class as xoshiro.
    return np.random.Generator(np.random.PCG64(seed))


def xavier_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else out + b


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    L, D = x.shape
    return transpose(x.reshape(L, n_heads, D // n_heads), (1, 0, 2))


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, weights: dict, n_heads: int) -> Tensor:
    """Scaled dot-product attention with ``n_heads`` heads.

    ``weights`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` (D x D matrices, length-D biases).
    Queries come from ``q`` (Lq x D); keys/values from ``k``/``v`` (Lk x D).
    """
    D = q.shape[-1]
    if D % n_heads:
        raise ConfigError(f"model dim {D} not divisible by {n_heads} heads")
    dh = D // n_heads
    Q = _split_heads(linear(q, weights["wq"], weights["bq"]), n_heads)
    K = _split_heads(linear(k, weights["wk"], weights["bk"]), n_heads)
    V = _split_heads(linear(v, weights["wv"], weights["bv"]), n_heads)
    scores = matmul(Q, transpose(K, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, V), (1, 0, 2)).reshape(q.shape[0], D)
    return linear(ctx, weights["wo"], weights["bo"])


def feed_forward(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


__all__ = ["make_rng", "xavier_uniform", "linear", "multihead_attention", "feed_forward", "layer_norm"]
