"""Recurrent slot memory: cross-attention read, slot-local write, biased normalisation.

Shapes: slots are ``[k, d]`` or batched ``[B, k, d]``; segment tokens are
``[n, d]`` or ``[B, n, d]``.

Write rule, per slot i and per head::

    q_i = m_i W_Q
    keys   = [m_i W_K ; x W_K]        (n + 1 rows)
    values = [m_i W_V ; x W_V]
    w      = softmax(q_i · keys / √d_head / τ)
    m_i'   = w · values

followed by BMN: ``m_i' ← (m_i' + v_bias_i) / ||m_i' + v_bias_i||``.  A slot
never sees another slot's key, so the write cannot move information between
slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, MASK_FILL, multi_head_attention, split_heads
from .errors import ConfigError, DimensionError, NumericError
from .nn import FeedForward, LayerNorm, Module, xavier
from .tensor import Tensor

BMN_EPS = 1e-8


@dataclass
class MemoryState:
    slots: Tensor
    v_bias: Tensor
    tau: float = 1.0
    step: int = 0
    write_weights: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.slots.shape[-2]

    def max_norm_deviation(self) -> float:
        norms = np.linalg.norm(self.slots.data.astype(np.float64), axis=-1)
        return float(np.abs(norms - 1.0).max())


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def bmn(slot: Tensor, v_bias: Tensor) -> Tensor:
    """Biased memory normalisation ``(slot + v_bias) / ||slot + v_bias||``.

    ``v_bias`` may be ``[d]`` for a single slot, or ``[k, d]`` applied row-wise
    to ``[k, d]`` / ``[B, k, d]`` slots.  When the sum nearly cancels
    (norm <= 1e-8) the direction ``1e-8 · v̂_bias`` is added before normalising.
    """
    vb = v_bias
    if slot.ndim == 3 and vb.ndim == 2:
        vb = T.reshape(vb, (1,) + vb.shape)
    s = slot + vb
    norms = np.linalg.norm(s.data, axis=-1, keepdims=True)
    tiny = norms <= BMN_EPS
    if np.any(tiny):
        nudge = np.where(tiny, BMN_EPS * _unit(np.broadcast_to(vb.data, s.shape)), 0.0).astype(s.dtype)
        s = s + nudge
    return T.l2_normalize(s, axis=-1)


class SlotMemory(Module):
    """Owns the learnable per-slot bias; the terminal/initial state is its direction."""

    def __init__(self, k: int, d: int, rng: np.random.Generator, dtype=np.float64, tau: float = 1.0,
                 bias_scale: float = 1.0):
        if k < 1:
            raise ConfigError(f"memory needs k >= 1 slots, got {k}")
        if tau <= 0:
            raise ConfigError(f"memory temperature must be > 0, got {tau}")
        vb = rng.normal(0.0, bias_scale / np.sqrt(d), size=(k, d))
        self.v_bias = Tensor(vb.astype(dtype), requires_grad=True)
        self.tau = float(tau)
        self.k, self.d = k, d

    def initial_state(self, batch: int | None = None) -> MemoryState:
        norms = np.linalg.norm(self.v_bias.data, axis=-1)
        if np.any(norms <= BMN_EPS):
            raise NumericError("v_bias has a slot with norm <= 1e-8")
        slots = T.l2_normalize(self.v_bias, axis=-1)
        if batch is not None:
            slots = T.reshape(slots, (1, self.k, self.d)) + Tensor(np.zeros((batch, 1, 1), dtype=self.v_bias.dtype))
        return MemoryState(slots=slots, v_bias=self.v_bias, tau=self.tau)

    def terminal_state(self) -> np.ndarray:
        return _unit(self.v_bias.data)


class WriteParams(Module):
    def __init__(self, d: int, num_heads: int, rng: np.random.Generator, dtype=np.float64):
        if d % num_heads:
            raise ConfigError(f"d={d} not divisible by num_heads={num_heads}")
        self.num_heads = num_heads
        self.w_q = xavier(rng, d, d, dtype)
        self.w_k = xavier(rng, d, d, dtype)
        self.w_v = xavier(rng, d, d, dtype)


def memory_read(x: Tensor, slots: Tensor, params: AttentionParams, return_weights: bool = False):
    """Tokens query the memory; keys and values are both projections of the slots."""
    if slots.shape[-2] < 1:
        raise ConfigError("memory_read with k = 0 slots")
    if x.shape[-1] != slots.shape[-1]:
        raise DimensionError(f"token width {x.shape[-1]} != slot width {slots.shape[-1]}")
    return multi_head_attention(params, x, slots, None, 1.0, return_weights)


def memory_write(state: MemoryState, x: Tensor | None, params: WriteParams,
                 token_mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Slot attention over ``[self; tokens]`` then BMN.

    Returns the new slots and the head-averaged write weights
    ``[..., k, n + 1]`` (column 0 is the slot's weight on itself).
    ``x=None`` is an empty segment.  ``token_mask`` (``[B, n]`` or ``[n]``,
    True = real token) excludes padding.
    """
    if state.tau <= 0:
        raise ConfigError(f"memory temperature must be > 0, got {state.tau}")
    m = state.slots
    if x is not None and x.shape[-1] != m.shape[-1]:
        raise DimensionError(f"token width {x.shape[-1]} != slot width {m.shape[-1]}")
    h = params.num_heads
    hd = m.shape[-1] // h
    scale = 1.0 / (np.sqrt(hd) * state.tau)
    qs = split_heads(T.matmul(m, params.w_q), h)
    kms = split_heads(T.matmul(m, params.w_k), h)
    vms = split_heads(T.matmul(m, params.w_v), h)
    if x is not None:
        kxs = split_heads(T.matmul(x, params.w_k), h)
        vxs = split_heads(T.matmul(x, params.w_v), h)
        fill = None
        if token_mask is not None:
            tm = np.asarray(token_mask, dtype=bool)
            fill = np.where(tm, 0.0, MASK_FILL).astype(m.dtype)
            fill = fill[..., None, :]  # broadcast over slots
    outs, ws = [], []
    for i in range(h):
        s_self = T.sum(qs[i] * kms[i], axis=-1, keepdims=True) * scale
        if x is None:
            w_self = Tensor(np.ones(s_self.shape, dtype=m.dtype))
            outs.append(vms[i] * w_self)
            ws.append(w_self.data)
            continue
        s_tok = T.matmul(qs[i], T.transpose(kxs[i])) * scale
        if fill is not None:
            s_tok = s_tok + Tensor(np.broadcast_to(fill, s_tok.shape).copy())
        w = T.softmax(T.concat([s_self, s_tok], axis=-1), axis=-1)
        n = s_tok.shape[-1]
        w_self = T.narrow(w, 0, 1, axis=-1)
        w_tok = T.narrow(w, 1, n + 1, axis=-1)
        outs.append(w_self * vms[i] + T.matmul(w_tok, vxs[i]))
        ws.append(w.data)
    new = outs[0] if h == 1 else T.concat(outs, axis=-1)
    return bmn(new, state.v_bias), np.mean(ws, axis=0)


def full_write_matrix(weights: np.ndarray) -> np.ndarray:
    """Expand ``[k, n+1]`` write weights to ``[k, k+n]`` over (all slots ; tokens)."""
    k = weights.shape[-2]
    n = weights.shape[-1] - 1
    full = np.zeros(weights.shape[:-2] + (k, k + n), dtype=weights.dtype)
    idx = np.arange(k)
    full[..., idx, idx] = weights[..., :, 0]
    full[..., :, k:] = weights[..., :, 1:]
    return full


class MemEncoderLayer(Module):
    def __init__(self, d: int, num_heads: int, rng: np.random.Generator, dtype=np.float64, ff_mult: int = 2,
                 is_last: bool = False, dropout: float = 0.0):
        self.self_attn = AttentionParams(d, d, num_heads, rng, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.read_attn = AttentionParams(d, d, num_heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ff = FeedForward(d, ff_mult * d, rng, dtype)
        self.ln3 = LayerNorm(d, dtype)
        self.is_last = is_last
        self.dropout = dropout

    def __call__(self, x: Tensor, slots: Tensor | None, self_mask=None, rng=None) -> Tensor:
        a = T.dropout(multi_head_attention(self.self_attn, x, x, self_mask), self.dropout, rng, self.training)
        h = self.ln1(x + a)
        if slots is not None:
            r = T.dropout(memory_read(h, slots, self.read_attn), self.dropout, rng, self.training)
            h = self.ln2(h + r)
        f = T.dropout(self.ff(h), self.dropout, rng, self.training)
        return self.ln3(h + f)


class MemoryEncoder(Module):
    """Layer stack over segments; only the last layer's output is written to memory."""

    def __init__(self, d: int, num_heads: int, layers: int, rng: np.random.Generator, dtype=np.float64,
                 ff_mult: int = 2, dropout: float = 0.0):
        if layers < 1:
            raise ConfigError("memory encoder needs at least one layer")
        self.layers = [
            MemEncoderLayer(d, num_heads, rng, dtype, ff_mult, is_last=(i == layers - 1), dropout=dropout)
            for i in range(layers)
        ]
        self.write = WriteParams(d, num_heads, rng, dtype)

    def run_segments(self, segments: list[Tensor], mem0: MemoryState, use_memory: bool = True,
                     token_masks: list | None = None, rng=None, record: bool = False):
        return run_segments(segments, mem0, self, use_memory, token_masks, rng, record)


def _self_mask(token_mask):
    if token_mask is None:
        return None
    tm = np.asarray(token_mask, dtype=bool)
    allowed = np.broadcast_to(tm[..., None, :], tm.shape + (tm.shape[-1],)).copy()
    n = tm.shape[-1]
    allowed[..., np.arange(n), np.arange(n)] = True  # padding rows attend to themselves
    return allowed


def run_segments(segments: list[Tensor], mem0: MemoryState, encoder: MemoryEncoder, use_memory: bool = True,
                 token_masks: list | None = None, rng=None, record: bool = False):
    """Process segments in order, reading memory in every layer and writing after the last.

    With ``use_memory=False`` the same stack runs without read or write and
    the memory stays at ``mem0``.  Returns ``(outputs, final_state)``.
    """
    if not segments:
        raise DimensionError("run_segments needs at least one segment")
    state = MemoryState(mem0.slots, mem0.v_bias, mem0.tau, mem0.step, list(mem0.write_weights))
    outputs = []
    for j, seg in enumerate(segments):
        tm = token_masks[j] if token_masks is not None else None
        smask = _self_mask(tm)
        h = seg
        for layer in encoder.layers:
            h = layer(h, state.slots if use_memory else None, smask, rng)
        outputs.append(h)
        if use_memory:
            slots, w = memory_write(state, h, encoder.write, tm)
            state = MemoryState(slots, state.v_bias, state.tau, state.step + 1,
                                state.write_weights + ([w] if record else []))
    return outputs, state
