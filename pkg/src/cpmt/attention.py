"""Scaled dot-product and multi-head attention with boolean masks.

Masks are boolean arrays, ``True`` where a query may attend to a key, shaped
``[n_q, n_k]`` or ``[B, n_q, n_k]``.  Disallowed scores receive an additive
-1e9 before the softmax, which drives their weight to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, MaskError
from .nn import Module, xavier
from .tensor import Tensor

MASK_FILL = -1e9


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray

    def __post_init__(self):
        check_mask(np.asarray(self.allowed, dtype=bool))


def check_mask(allowed: np.ndarray) -> np.ndarray:
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.ndim not in (2, 3):
        raise DimensionError(f"mask must be [n_q, n_k] or [B, n_q, n_k], got {allowed.shape}")
    if not allowed.any(axis=-1).all():
        raise MaskError("attention mask leaves at least one query row with no allowed key")
    return allowed


def _mask_array(mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        return np.asarray(mask.allowed, dtype=bool)
    return check_mask(mask)


def block_diagonal_mask(bounds: list[tuple[int, int]], n: int) -> np.ndarray:
    """Allow attention only within each ``[start, stop)`` block of a length-``n`` sequence."""
    allowed = np.zeros((n, n), dtype=bool)
    for start, stop in bounds:
        allowed[start:stop, start:stop] = True
    return allowed


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask=None, temperature: float = 1.0
) -> tuple[Tensor, Tensor]:
    """``softmax(q kᵀ / √d / temperature) v``; returns (output, weights)."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scores = T.matmul(q, T.transpose(k)) * (1.0 / (np.sqrt(q.shape[-1]) * temperature))
    allowed = _mask_array(mask)
    if allowed is not None:
        if allowed.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(f"mask shape {allowed.shape} does not match scores {scores.shape}")
        fill = np.where(allowed, 0.0, MASK_FILL).astype(scores.dtype)
        if fill.ndim < scores.ndim:
            fill = fill[None]
        scores = scores + Tensor(fill)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


class AttentionParams(Module):
    """Projection weights for multi-head attention (no biases, as in the bilinear form)."""

    def __init__(self, d_in: int, d_model: int, num_heads: int, rng: np.random.Generator,
                 dtype=np.float64, d_kv: int | None = None):
        if num_heads < 1 or d_model % num_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        d_kv = d_in if d_kv is None else d_kv
        self.d_in, self.d_kv, self.d_model, self.num_heads = d_in, d_kv, d_model, num_heads
        self.w_q = xavier(rng, d_in, d_model, dtype)
        self.w_k = xavier(rng, d_kv, d_model, dtype)
        self.w_v = xavier(rng, d_kv, d_model, dtype)
        self.w_o = xavier(rng, d_model, d_model, dtype)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


def split_heads(x: Tensor, num_heads: int) -> list[Tensor]:
    hd = x.shape[-1] // num_heads
    if num_heads == 1:
        return [x]
    return [T.narrow(x, h * hd, (h + 1) * hd, axis=-1) for h in range(num_heads)]


def multi_head_attention(
    params: AttentionParams, x_q: Tensor, x_kv: Tensor, mask=None, temperature: float = 1.0,
    return_weights: bool = False,
):
    """Project, attend per head, concatenate heads, apply the output projection.

    With ``return_weights`` the head-averaged weight matrix (numpy) is returned
    alongside the output.
    """
    if x_q.shape[-1] != params.d_in or x_kv.shape[-1] != params.d_kv:
        raise DimensionError(
            f"attention inputs {x_q.shape}, {x_kv.shape} do not match d_in={params.d_in}, d_kv={params.d_kv}"
        )
    allowed = _mask_array(mask)
    qs = split_heads(T.matmul(x_q, params.w_q), params.num_heads)
    ks = split_heads(T.matmul(x_kv, params.w_k), params.num_heads)
    vs = split_heads(T.matmul(x_kv, params.w_v), params.num_heads)
    outs, ws = [], []
    for q, k, v in zip(qs, ks, vs):
        o, w = scaled_dot_attention(q, k, v, allowed, temperature)
        outs.append(o)
        ws.append(w.data)
    out = T.matmul(outs[0] if len(outs) == 1 else T.concat(outs, axis=-1), params.w_o)
    if return_weights:
        return out, np.mean(ws, axis=0)
    return out
