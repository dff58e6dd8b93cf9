"""Full pipeline: fusion → cross-person encoding → segment recurrence → MLP head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import block_diagonal_mask
from .crossmodal import DEFAULT_DIMS, ModalityStream, PersonFusion, aligned_length, nearest_indices
from .crossperson import ConcatPolicy, CrossPersonEncoder
from .errors import ConfigError, DataError
from .memory import MemoryEncoder, MemoryState, SlotMemory
from .nn import Linear, Module
from .tensor import Tensor
from .verbal import VerbalEncoder, VerbalMemory

ABLATIONS = ("no_llm", "no_memory", "no_individuals")


@dataclass
class Ablations:
    no_llm: bool = False
    no_memory: bool = False
    no_individuals: bool = False

    @classmethod
    def named(cls, name: str | None) -> "Ablations":
        if name in (None, "", "none"):
            return cls()
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; expected none or one of {ABLATIONS}")
        return cls(**{name: True})


@dataclass
class CPMTConfig:
    d_model: int = 16
    num_heads: int = 2
    crossmodal_layers: int = 1
    cpa_layers: int = 3
    mem_layers: int = 2
    k_slots: int = 16
    K_segments: int = 4
    tau: float = 1.0
    concat_policy: str = "symmetric"
    num_classes: int = 3
    dropout_rate: float = 0.0
    behavior_dim: int = 32
    ablations: Ablations = field(default_factory=Ablations)
    seed: int = 0
    modalities: tuple = ("audio", "video")
    modality_dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    common_rate: float | None = None
    segment_local: bool = True
    ff_mult: int = 2
    bias_scale: float = 1.0
    verbal: bool = False
    verbal_layers: int = 1
    verbal_buckets: int = 512
    verbal_max_tokens: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.ablations, dict):
            self.ablations = Ablations(**self.ablations)
        self.modalities = tuple(self.modalities)
        for name in ("d_model", "num_heads", "k_slots", "K_segments", "behavior_dim", "mem_layers", "ff_mult",
                     "verbal_layers", "verbal_buckets", "verbal_max_tokens"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("crossmodal_layers", "cpa_layers"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if (2 * self.d_model) % self.num_heads or self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        ConcatPolicy(self.concat_policy)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CPMTConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)


# Full-scale settings for the real corpora; desk-scale runs keep the defaults above.
PRESETS = {
    "dami": dict(concat_policy="child_coordinated", k_slots=128, behavior_dim=640),
    "mpii": dict(concat_policy="symmetric", k_slots=256, behavior_dim=640),
    "boss": dict(concat_policy="symmetric", k_slots=256, behavior_dim=640),
}
TRAIN_PRESETS = {
    "dami": dict(batch_size=48, learning_rate=3e-3, epochs=20, gamma=10.0),
    "mpii": dict(batch_size=48, learning_rate=1e-3, epochs=15, gamma=10.0),
    "boss": dict(batch_size=32, learning_rate=2e-3, epochs=15, gamma=10.0),
}


def preset(name: str, **overrides) -> CPMTConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return CPMTConfig(**{**PRESETS[name], **overrides})


@dataclass
class Batch:
    """Collated fragments.  ``persons[p][modality]`` is ``[B, T_m, d_m]``; person 0 is self."""

    persons: list[dict[str, np.ndarray]]
    frame_rates: list[dict[str, float]]
    labels: np.ndarray | None = None
    token_ids: list[np.ndarray] | None = None
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return next(iter(self.persons[0].values())).shape[0]

    def streams(self, p: int) -> list[ModalityStream]:
        return [ModalityStream(m, x, self.frame_rates[p].get(m, 1.0)) for m, x in self.persons[p].items()]


def segment_bounds(T_len: int, K: int) -> list[tuple[int, int]]:
    """K near-equal contiguous segments (sizes differ by at most one, longer first)."""
    if K > T_len:
        raise DataError(f"sequence of length {T_len} cannot be split into K={K} segments; use K <= {T_len}")
    edges = [(i * T_len) // K for i in range(K + 1)]
    sizes = np.diff(edges)
    # front-load the remainder so earlier segments are never shorter
    sizes = np.sort(sizes)[::-1]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(edges[i]), int(edges[i + 1])) for i in range(K)]


def pool(segment_outputs: list[Tensor], mem_final: MemoryState) -> Tensor:
    """concat(temporal mean of the last segment, mean over memory slots)."""
    if not segment_outputs:
        raise DataError("pool needs at least one segment output")
    last = segment_outputs[-1]
    return T.concat([T.mean(last, axis=-2), T.mean(mem_final.slots, axis=-2)], axis=-1)


class CPMT(Module):
    def __init__(self, cfg: CPMTConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        d = cfg.d_model
        self.policy = ConcatPolicy(cfg.concat_policy)
        self.fusion = PersonFusion(cfg.modalities, cfg.modality_dims, d, cfg.num_heads, cfg.crossmodal_layers,
                                   rng, dt, cfg.ff_mult, cfg.dropout_rate)
        self.crossperson = CrossPersonEncoder(2 * d, cfg.num_heads, cfg.cpa_layers, self.policy, rng, dt,
                                              cfg.ff_mult, cfg.dropout_rate)
        width = 2 * d if cfg.ablations.no_individuals else self.policy.n_streams * 2 * d
        self.adapter = Linear(width, d, rng, dt)
        self.memory = SlotMemory(cfg.k_slots, d, rng, dt, cfg.tau, cfg.bias_scale)
        self.encoder = MemoryEncoder(d, cfg.num_heads, cfg.mem_layers, rng, dt, cfg.ff_mult, cfg.dropout_rate)
        self.head1 = Linear(2 * d, cfg.behavior_dim, rng, dt)
        self.head2 = Linear(cfg.behavior_dim, cfg.num_classes, rng, dt)
        # built last so enabling it leaves every other initial weight unchanged
        self.verbal = (
            VerbalEncoder(d, cfg.num_heads, cfg.verbal_layers, cfg.verbal_buckets, cfg.verbal_max_tokens, rng, dt,
                          cfg.ff_mult)
            if self.uses_verbal else None
        )

    @property
    def uses_verbal(self) -> bool:
        return self.cfg.verbal and not self.cfg.ablations.no_llm

    # -- pieces -------------------------------------------------------------
    def aligned_length(self, batch: Batch) -> int:
        streams = [s for p in range(2) for s in batch.streams(p) if s.modality in self.fusion.modalities]
        return aligned_length(streams, self.cfg.common_rate)

    def _merged_streams(self, batch: Batch, t: int) -> list[ModalityStream]:
        out = []
        for m in self.fusion.modalities:
            xs = []
            for p in range(2):
                x = batch.persons[p][m]
                if x.shape[-2] != t:
                    x = np.take(x, nearest_indices(x.shape[-2], t), axis=-2)
                xs.append(x)
            out.append(ModalityStream(m, 0.5 * (xs[0] + xs[1]), 1.0))
        return out

    def initial_memory(self, batch: Batch, verbal: VerbalMemory | None = None, rng=None) -> MemoryState:
        mem0 = self.memory.initial_state(batch.size)
        if verbal is not None:
            mem = verbal.mem if verbal.mem.ndim == 3 else T.reshape(verbal.mem, (1,) + verbal.mem.shape)
            return MemoryState(mem, mem0.v_bias, mem0.tau, 0)
        if self.uses_verbal and batch.token_ids is not None:
            vm = self.verbal.encode_ids(batch.token_ids, self.memory, rng)
            return MemoryState(vm.mem, mem0.v_bias, mem0.tau, 0)
        return mem0

    def forward_batch(self, batch: Batch, verbal: VerbalMemory | None = None, rng=None,
                      trace: dict | None = None) -> Tensor:
        cfg = self.cfg
        if len(batch.persons) != 2:
            raise DataError(f"the model takes exactly two persons, got {len(batch.persons)}")
        t = self.aligned_length(batch)
        bounds = segment_bounds(t, cfg.K_segments)
        mask = block_diagonal_mask(bounds, t) if cfg.segment_local else None
        fusion_trace = {} if trace is not None else None
        cp_trace = {} if trace is not None else None
        if cfg.ablations.no_individuals:
            rep = self.fusion(self._merged_streams(batch, t), t, mask, rng, fusion_trace, "merged")
            enc = self.crossperson.merged(rep, mask, rng, cp_trace)
        else:
            reps = []
            for p, tag in ((0, "self"), (1, "other")):
                tr = {} if trace is not None else None
                reps.append(self.fusion(batch.streams(p), t, mask, rng, tr, tag))
                if trace is not None:
                    fusion_trace[tag] = tr
            enc = self.crossperson.encode_pair(reps[0], reps[1], mask, rng, cp_trace)
        h = self.adapter(enc)
        segments = [T.narrow(h, s, e, axis=-2) for s, e in bounds]
        mem0 = self.initial_memory(batch, verbal, rng)
        outputs, state = self.encoder.run_segments(segments, mem0, not cfg.ablations.no_memory, None, rng,
                                                   record=trace is not None)
        logits = self.head2(T.gelu(self.head1(pool(outputs, state))))
        if trace is not None:
            trace.update(crossmodal=fusion_trace, cpa=cp_trace, memory_write=state.write_weights,
                         segments=bounds, memory_slots=state.slots.numpy())
        return logits

    def forward(self, persons, verbal: VerbalMemory | None = None) -> Tensor:
        """Single-fragment convenience wrapper; returns logits ``[num_classes]``."""
        if len(persons) != 2:
            raise DataError(f"the model takes exactly two persons, got {len(persons)}")
        batch = Batch(
            persons=[{s.modality: s.features[None] for s in p.streams} for p in persons],
            frame_rates=[{s.modality: s.frame_rate for s in p.streams} for p in persons],
        )
        if verbal is not None and verbal.mem.ndim == 2:
            verbal = VerbalMemory(T.reshape(verbal.mem, (1,) + verbal.mem.shape), verbal.empty)
        logits = self.forward_batch(batch, verbal)
        return T.reshape(logits, (self.cfg.num_classes,))

    __call__ = forward_batch


def count_parameters(cfg: CPMTConfig) -> int:
    """Closed-form parameter count for ``cfg`` (must agree with ``CPMT(cfg).num_parameters()``)."""
    d, f = cfg.d_model, cfg.ff_mult
    ln = lambda w: 2 * w  # noqa: E731
    ff = lambda w: w * f * w + f * w + f * w * w + w  # noqa: E731
    attn = lambda w: 4 * w * w  # noqa: E731
    cross_layer = lambda w: attn(w) + ln(w) + ff(w) + ln(w)  # noqa: E731
    mods = [m for m in cfg.modalities]
    n = sum(cfg.modality_dims[m] * d + d for m in mods)
    n_blocks = 2 if len(mods) == 2 else 1
    n += n_blocks * cfg.crossmodal_layers * cross_layer(d)
    n += 2 * cfg.cpa_layers * cross_layer(2 * d)
    width = 2 * d if cfg.ablations.no_individuals else ConcatPolicy(cfg.concat_policy).n_streams * 2 * d
    n += width * d + d
    n += cfg.k_slots * d
    mem_layer = attn(d) + ln(d) + attn(d) + ln(d) + ff(d) + ln(d)
    n += cfg.mem_layers * mem_layer + 3 * d * d
    n += 2 * d * cfg.behavior_dim + cfg.behavior_dim + cfg.behavior_dim * cfg.num_classes + cfg.num_classes
    if cfg.verbal and not cfg.ablations.no_llm:
        n += cfg.verbal_buckets * d + cfg.verbal_layers * mem_layer + 3 * d * d
    return n
