"""Post-norm attention blocks shared by the cross-modal and cross-person encoders."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionParams, multi_head_attention
from .errors import DimensionError
from .nn import FeedForward, LayerNorm, Module
from .tensor import Tensor


class CrossLayer(Module):
    def __init__(self, d: int, num_heads: int, ff_mult: int, rng: np.random.Generator, dtype=np.float64,
                 dropout: float = 0.0):
        self.attn = AttentionParams(d, d, num_heads, rng, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ff = FeedForward(d, ff_mult * d, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.dropout = dropout

    def __call__(self, query: Tensor, source: Tensor, mask=None, rng=None, trace: list | None = None) -> Tensor:
        if trace is not None:
            a, w = multi_head_attention(self.attn, query, source, mask, return_weights=True)
            trace.append(w)
        else:
            a = multi_head_attention(self.attn, query, source, mask)
        a = T.dropout(a, self.dropout, rng, self.training)
        h = self.ln1(query + a)
        f = T.dropout(self.ff(h), self.dropout, rng, self.training)
        return self.ln2(h + f)


class CrossTransformer(Module):
    """``layers`` stacked blocks; the query stream is refined, the source stays fixed.

    Each block is attention(query=tgt, key/value=src) + residual + layer norm,
    then feed-forward + residual + layer norm.  With ``layers == 0`` the
    target passes through untouched.
    """

    def __init__(self, d: int, num_heads: int, layers: int, rng: np.random.Generator, dtype=np.float64,
                 ff_mult: int = 2, dropout: float = 0.0):
        self.layers = [CrossLayer(d, num_heads, ff_mult, rng, dtype, dropout) for _ in range(layers)]

    def __call__(self, src: Tensor, tgt: Tensor, mask=None, rng=None, trace: list | None = None) -> Tensor:
        if src.shape != tgt.shape:
            raise DimensionError(f"source {src.shape} and target {tgt.shape} must share shape")
        h = tgt
        for layer in self.layers:
            h = layer(h, src, mask, rng, trace)
        return h
