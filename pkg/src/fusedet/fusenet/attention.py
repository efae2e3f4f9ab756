"""Scaled dot-product attention and the transformer encoder layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore import ShapeError, Tensor, ops
from .nn import LayerNorm, Linear, Module


def attention(q, k, v):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Accepts (..., T, d) stacks; Q, K and V must agree on the token count
    (self-attention) and Q/K on d_k.  Returns (output, weights).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: d_k mismatch between Q {q.shape} and K {k.shape}")
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention: token counts of Q {q.shape}, K {k.shape}, V {v.shape} differ")
    d_k = q.shape[-1]
    scale = Tensor(np.asarray(1.0 / np.sqrt(d_k), dtype=q.dtype))
    logits = ops.mul(ops.matmul(q, ops.transpose(k, _swap_last_two(k.ndim))), scale)
    weights = ops.softmax(logits, axis=-1)
    return ops.matmul(weights, v), weights


def _swap_last_two(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


class MultiHeadAttention(Module):
    """Self-attention over (N, T, C) with ``num_heads`` parallel heads."""

    def __init__(self, rng, d_model, num_heads):
        super().__init__()
        if d_model % num_heads:
            raise ValueError(f"d_model {d_model} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def _heads(self, x, n, t):
        x = ops.reshape(x, (n, t, self.num_heads, self.d_head))
        return ops.transpose(x, (0, 2, 1, 3))

    def __call__(self, x):
        n, t, c = x.shape
        q = self._heads(self.wq(x), n, t)
        k = self._heads(self.wk(x), n, t)
        v = self._heads(self.wv(x), n, t)
        out, weights = attention(q, k, v)        # out (n, h, t, d_head)
        out = ops.transpose(out, (0, 2, 1, 3))
        out = ops.reshape(out, (n, t, c))
        return self.wo(out), weights             # weights (n, h, t, t)


class TransformerLayer(Module):
    """Pre-norm encoder layer: MHA + 2-layer feed-forward, both residual."""

    def __init__(self, rng, d_model, num_heads, ff_mult=4):
        super().__init__()
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, num_heads)
        self.ln2 = LayerNorm(d_model)
        self.ff1 = Linear(rng, d_model, ff_mult * d_model)
        self.ff2 = Linear(rng, ff_mult * d_model, d_model)

    def __call__(self, x):
        attn_out, weights = self.attn(self.ln1(x))
        x = ops.add(x, attn_out)
        ff = self.ff2(ops.relu(self.ff1(self.ln2(x))))
        return ops.add(x, ff), weights


@dataclass
class AttentionRecord:
    """One head's attention matrix at one fusion stage and layer."""

    stage: int
    layer: int
    head: int
    matrix: np.ndarray                      # (T, T), rows sum to 1
    token_ranges: dict = field(default_factory=dict)  # view tag -> (start, end)

    @property
    def num_tokens(self):
        return self.matrix.shape[-1]
